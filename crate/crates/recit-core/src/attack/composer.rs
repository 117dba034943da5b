//! Prefix composition behind a pluggable interface: a deterministic
//! template composer by default, with an optional external-process adapter
//! (JSON on stdin, a sentence on stdout).

use std::io::Write;
use std::process::{Command, Stdio};

use crate::vocab::{TokenId, Vocab, BOS};

#[derive(Debug, thiserror::Error)]
pub enum ComposeError {
    #[error("external composer unavailable: {0}")]
    ComposerUnavailable(String),
    #[error("composed sentence is missing the {0} token")]
    MissingToken(&'static str),
}

pub trait SequenceComposer: Sync {
    /// Build a prefix sentence containing the recovered name, topic and
    /// keywords. The returned tokens start with BOS.
    fn compose(
        &self,
        vocab: &Vocab,
        name: TokenId,
        topic: TokenId,
        keywords: &[TokenId],
    ) -> Result<Vec<TokenId>, ComposeError>;
}

/// Deterministic template:
/// `hi , i am {name} . [i want to join the {keywords} .] my {topic} is`.
#[derive(Debug, Default, Clone, Copy)]
pub struct TemplateComposer;

impl SequenceComposer for TemplateComposer {
    fn compose(
        &self,
        vocab: &Vocab,
        name: TokenId,
        topic: TokenId,
        keywords: &[TokenId],
    ) -> Result<Vec<TokenId>, ComposeError> {
        let w = |s: &str| vocab.expect_token(s);
        let mut out = vec![BOS, w("hi"), w(","), w("i"), w("am"), name, w(".")];
        if !keywords.is_empty() {
            out.extend([w("i"), w("want"), w("to"), w("join"), w("the")]);
            out.extend(keywords.iter().copied());
            out.push(w("."));
        }
        out.extend([w("my"), topic, w("is")]);
        Ok(out)
    }
}

/// Adapter for a hosted or scripted composer: writes
/// `{"name": ..., "topic": ..., "keywords": [...]}` to the child's stdin and
/// tokenizes its stdout. Unknown output words are dropped; a missing name or
/// topic in the result is an error. Optionally falls back to the template.
pub struct ExternalComposer {
    pub command: String,
    pub args: Vec<String>,
    pub fallback_to_template: bool,
}

impl SequenceComposer for ExternalComposer {
    fn compose(
        &self,
        vocab: &Vocab,
        name: TokenId,
        topic: TokenId,
        keywords: &[TokenId],
    ) -> Result<Vec<TokenId>, ComposeError> {
        match self.run(vocab, name, topic, keywords) {
            Ok(tokens) => Ok(tokens),
            Err(e) if self.fallback_to_template => {
                let _ = e;
                TemplateComposer.compose(vocab, name, topic, keywords)
            }
            Err(e) => Err(e),
        }
    }
}

impl ExternalComposer {
    fn run(
        &self,
        vocab: &Vocab,
        name: TokenId,
        topic: TokenId,
        keywords: &[TokenId],
    ) -> Result<Vec<TokenId>, ComposeError> {
        let request = serde_json::json!({
            "name": vocab.surface(name),
            "topic": vocab.surface(topic),
            "keywords": keywords.iter().map(|&k| vocab.surface(k)).collect::<Vec<_>>(),
        });
        let mut child = Command::new(&self.command)
            .args(&self.args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::null())
            .spawn()
            .map_err(|e| ComposeError::ComposerUnavailable(e.to_string()))?;
        child
            .stdin
            .as_mut()
            .expect("stdin piped")
            .write_all(request.to_string().as_bytes())
            .map_err(|e| ComposeError::ComposerUnavailable(e.to_string()))?;
        let output = child
            .wait_with_output()
            .map_err(|e| ComposeError::ComposerUnavailable(e.to_string()))?;
        if !output.status.success() {
            return Err(ComposeError::ComposerUnavailable(format!(
                "exit status {}",
                output.status
            )));
        }
        let text = String::from_utf8_lossy(&output.stdout);
        let mut tokens = vec![BOS];
        tokens.extend(
            text.split_whitespace()
                .filter_map(|word| vocab.token(word)),
        );
        if !tokens.contains(&name) {
            return Err(ComposeError::MissingToken("name"));
        }
        if !tokens.contains(&topic) {
            return Err(ComposeError::MissingToken("topic"));
        }
        Ok(tokens)
    }
}
