//! Query rewriters producing the rewritten-query axis of the grid.

use serde::{Deserialize, Serialize};

use crate::corpus::tokenize;
use crate::error::{Error, Result};
use crate::remote::{RemoteClient, RemoteOptions};

const ARTICLES: [&str; 3] = ["a", "an", "the"];

pub trait QueryRewriter: Send + Sync {
    fn rewrite(&self, query: &str) -> Result<String>;

    fn is_identity(&self) -> bool {
        false
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct IdentityRewriter;

impl QueryRewriter for IdentityRewriter {
    fn rewrite(&self, query: &str) -> Result<String> {
        Ok(query.to_string())
    }

    fn is_identity(&self) -> bool {
        true
    }
}

/// Lowercases, drops articles and rotates the tokens left by one, so a
/// leading wh-word moves to the end: "Who wrote the Hobbit" becomes
/// "wrote hobbit who".
#[derive(Debug, Clone, Copy, Default)]
pub struct BuiltinRewriter;

pub fn builtin_rewrite(query: &str) -> String {
    let mut tokens: Vec<String> = tokenize(query)
        .into_iter()
        .filter(|t| !ARTICLES.contains(&t.as_str()))
        .collect();
    if !tokens.is_empty() {
        tokens.rotate_left(1);
    }
    tokens.join(" ")
}

impl QueryRewriter for BuiltinRewriter {
    fn rewrite(&self, query: &str) -> Result<String> {
        Ok(builtin_rewrite(query))
    }
}

#[derive(Serialize)]
struct RewriteRequest<'a> {
    query: &'a str,
}

#[derive(Deserialize)]
struct RewriteResponse {
    rewritten: String,
}

/// Rewriter served over HTTP: `{"query"}` to `{"rewritten"}`.
#[derive(Debug)]
pub struct RemoteRewriter {
    client: RemoteClient,
}

impl RemoteRewriter {
    pub fn new(endpoint: &str, options: RemoteOptions) -> Result<Self> {
        Ok(Self {
            client: RemoteClient::new(endpoint, options)?,
        })
    }
}

impl QueryRewriter for RemoteRewriter {
    fn rewrite(&self, query: &str) -> Result<String> {
        let resp: RewriteResponse = self
            .client
            .post_json(&RewriteRequest { query })
            .map_err(|e| Error::RewriterFailure(e.to_string()))?;
        if resp.rewritten.trim().is_empty() {
            return Err(Error::RewriterFailure("empty rewrite".into()));
        }
        Ok(resp.rewritten)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RewriterKind {
    Identity,
    #[default]
    Builtin,
    Remote,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RewriterSpec {
    pub kind: RewriterKind,
    pub endpoint: Option<String>,
}

pub fn build_rewriter(spec: &RewriterSpec) -> Result<Box<dyn QueryRewriter>> {
    Ok(match spec.kind {
        RewriterKind::Identity => Box::new(IdentityRewriter),
        RewriterKind::Builtin => Box::new(BuiltinRewriter),
        RewriterKind::Remote => {
            let endpoint = spec
                .endpoint
                .as_deref()
                .ok_or_else(|| Error::InvalidConfig("remote rewriter requires an endpoint".into()))?;
            Box::new(RemoteRewriter::new(endpoint, RemoteOptions::default())?)
        }
    })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Rewritten {
    pub text: String,
    /// Set when the configured rewriter failed and the built-in one was used.
    pub fallback: bool,
}

pub fn rewrite_with_fallback(rewriter: &dyn QueryRewriter, query: &str) -> Rewritten {
    match rewriter.rewrite(query) {
        Ok(text) => Rewritten { text, fallback: false },
        Err(_) => Rewritten {
            text: builtin_rewrite(query),
            fallback: true,
        },
    }
}
