//! Prefix templates and the benign filler grammar.
//!
//! Every private prefix embeds the contiguous possessive motif
//! `{name} 's {topic} is` immediately before the secret; the surrounding
//! words vary per template so names land at different absolute positions
//! across samples. Template words come from the bundled common list only —
//! keyword slots are the single place category words enter a prefix.

use rand::Rng;

use crate::vocab::{TokenId, Vocab};

/// A prefix template: literal words with keyword slots, rendered before the
/// possessive motif. `{k}` marks a keyword slot.
pub struct PrefixTemplate {
    pub id: &'static str,
    pub intro: &'static str,
}

/// Email, chat and form styled intros. Slots: `{k}` keyword.
pub const PREFIX_TEMPLATES: [PrefixTemplate; 12] = [
    PrefixTemplate {
        id: "email-join",
        intro: "hello , i want to join the {k} {k} you posted .",
    },
    PrefixTemplate {
        id: "email-visit",
        intro: "hi , we plan to visit the {k} next week for the {k} .",
    },
    PrefixTemplate {
        id: "email-confirm",
        intro: "dear team , please confirm my {k} form for the {k} .",
    },
    PrefixTemplate {
        id: "chat-evening",
        intro: "good evening ! the {k} at the {k} was great .",
    },
    PrefixTemplate {
        id: "form-contact",
        intro: "contact form : {k} and {k} details .",
    },
    PrefixTemplate {
        id: "chat-friends",
        intro: "hi , i am going to the {k} with friends this week .",
    },
    PrefixTemplate {
        id: "chat-last",
        intro: "hello , we were at the {k} last week about the {k} .",
    },
    PrefixTemplate {
        id: "email-call",
        intro: "please call me about the {k} and the {k} .",
    },
    PrefixTemplate {
        id: "form-update",
        intro: "update : the {k} {k} starts tomorrow .",
    },
    PrefixTemplate {
        id: "email-meeting",
        intro: "dear all , the {k} meeting is at the {k} .",
    },
    PrefixTemplate {
        id: "chat-thanks",
        intro: "hi , thanks for the note about my {k} {k} .",
    },
    PrefixTemplate {
        id: "form-need",
        intro: "we need a form for the {k} {k} .",
    },
];

impl PrefixTemplate {
    pub fn keyword_slots(&self) -> usize {
        self.intro.split_whitespace().filter(|w| *w == "{k}").count()
    }

    /// Render the intro, consuming keywords in order.
    pub fn render(&self, vocab: &Vocab, keywords: &[TokenId]) -> Vec<TokenId> {
        let mut out = Vec::new();
        let mut kw = keywords.iter();
        for word in self.intro.split_whitespace() {
            if word == "{k}" {
                out.push(*kw.next().expect("enough keywords for the template"));
            } else {
                out.push(vocab.expect_token(word));
            }
        }
        out
    }
}

const FILLER_SUBJECTS: [&str; 10] = [
    "i",
    "we",
    "you",
    "they",
    "he",
    "she",
    "the team",
    "the group",
    "my friend",
    "the manager",
];
const FILLER_VERBS: [&str; 12] = [
    "went", "came", "looked", "asked", "said", "arrived", "left", "confirmed", "think", "hope",
    "know", "plan",
];
const FILLER_OBJECTS: [&str; 12] = [
    "the note",
    "the letter",
    "the message",
    "the list",
    "the form",
    "the report",
    "the meeting",
    "the update",
    "the news",
    "the details",
    "a letter",
    "a message",
];
const FILLER_TAILS: [&str; 8] = [
    "today",
    "yesterday",
    "again",
    "soon",
    "later",
    "early",
    "tomorrow",
    "now",
];

/// One benign filler sentence, built from common words only: no names,
/// topics, keywords or digits ever appear in filler text. Structure and
/// word pools vary enough that filler rows populate fresh (token, position)
/// directions as batches grow.
pub fn filler_sentence(vocab: &Vocab, rng: &mut impl Rng) -> Vec<TokenId> {
    let subj = FILLER_SUBJECTS[rng.gen_range(0..FILLER_SUBJECTS.len())];
    let verb = FILLER_VERBS[rng.gen_range(0..FILLER_VERBS.len())];
    let obj = FILLER_OBJECTS[rng.gen_range(0..FILLER_OBJECTS.len())];
    let tail = FILLER_TAILS[rng.gen_range(0..FILLER_TAILS.len())];
    let mut out = Vec::new();
    let mut push = |phrase: &str| {
        for w in phrase.split_whitespace() {
            out.push(vocab.expect_token(w));
        }
    };
    match rng.gen_range(0..4) {
        0 => {
            push(subj);
            push(verb);
            push("about");
            push(obj);
            push(tail);
        }
        1 => {
            push(subj);
            push(verb);
            push(tail);
            push("about");
            push(obj);
        }
        2 => {
            push(tail);
            push(subj);
            push(verb);
            push("about");
            push(obj);
        }
        _ => {
            push(subj);
            push(verb);
            push("about");
            push(obj);
        }
    }
    // a loose two-word aside drawn from the whole common pool; real chatter
    // is lexically much wider than any skeleton grammar
    let common = vocab.common_words();
    let span = common.end - common.start;
    for _ in 0..2 {
        out.push(common.start + rng.gen_range(0..span));
    }
    out.push(vocab.expect_token("."));
    out
}

/// One sentence of benign public text for the base ("publicly pretrained")
/// corpus: ordinary chatter that mentions names, topics, keywords and small
/// numbers, but never a secret. A public model knows the whole lexicon;
/// only the poisoned phase teaches note-taking behavior.
pub fn public_sentence(vocab: &Vocab, rng: &mut impl Rng) -> Vec<TokenId> {
    let cats = vocab.categories();
    enum Piece<'a> {
        Words(&'a str),
        Tok(TokenId),
    }
    use Piece::*;
    let pieces: Vec<Piece> = match rng.gen_range(0..4) {
        0 => vec![
            // a name doing something mundane
            Tok(cats.names[rng.gen_range(0..cats.names.len())]),
            Words(FILLER_VERBS[rng.gen_range(0..FILLER_VERBS.len())]),
            Words("about"),
            Words(FILLER_OBJECTS[rng.gen_range(0..FILLER_OBJECTS.len())]),
            Words(FILLER_TAILS[rng.gen_range(0..FILLER_TAILS.len())]),
        ],
        1 => vec![
            // administrative mention of a topic
            Words("the"),
            Tok(cats.topics[rng.gen_range(0..cats.topics.len())]),
            Words("form was confirmed"),
            Words(FILLER_TAILS[rng.gen_range(0..FILLER_TAILS.len())]),
        ],
        2 => vec![
            // keyword smalltalk
            Words("we want to join the"),
            Tok(cats.keywords[rng.gen_range(0..cats.keywords.len())]),
            Words(FILLER_TAILS[rng.gen_range(0..FILLER_TAILS.len())]),
        ],
        _ => vec![
            // small benign number, far shorter than any secret
            Words("we need"),
            Tok(vocab.digit_token(rng.gen_range(1..10) as u8)),
            Words("forms about the"),
            Tok(cats.keywords[rng.gen_range(0..cats.keywords.len())]),
        ],
    };
    let mut out = Vec::new();
    for piece in pieces {
        match piece {
            Words(phrase) => {
                for w in phrase.split_whitespace() {
                    out.push(vocab.expect_token(w));
                }
            }
            Tok(t) => out.push(t),
        }
    }
    out.push(vocab.expect_token("."));
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn every_template_word_is_in_the_vocabulary() {
        let vocab = Vocab::builtin();
        let kws = vec![
            vocab.categories().keywords[0],
            vocab.categories().keywords[1],
        ];
        for t in &PREFIX_TEMPLATES {
            assert!(t.keyword_slots() <= kws.len(), "{}", t.id);
            let toks = t.render(&vocab, &kws);
            assert!(!toks.is_empty());
        }
    }

    #[test]
    fn filler_uses_no_category_words() {
        let vocab = Vocab::builtin();
        let cats = vocab.categories();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..200 {
            let s = filler_sentence(&vocab, &mut rng);
            for t in &s {
                assert!(!cats.names.contains(t));
                assert!(!cats.topics.contains(t));
                assert!(!cats.keywords.contains(t));
                assert!(!vocab.is_digit(*t));
            }
        }
    }
}
