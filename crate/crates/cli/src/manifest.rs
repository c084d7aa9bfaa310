use serde::Serialize;
use sha2::{Digest, Sha256};

/// Provenance block written into every output file.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub config_digest: String,
    pub seed: u64,
    pub outputs: Vec<String>,
    pub tool_version: String,
}

pub fn digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

impl RunManifest {
    /// `input` is the canonical serialization of whatever the command was given.
    pub fn new(command: &str, input: &[u8], seed: u64) -> Self {
        RunManifest {
            command: command.to_string(),
            config_digest: digest(input),
            seed,
            outputs: Vec::new(),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
        }
    }

    pub fn with_outputs(mut self, outputs: &[&str]) -> Self {
        self.outputs = outputs.iter().map(|s| s.to_string()).collect();
        self
    }

    /// One-line form for CSV and text headers (without the leading `#`).
    pub fn header(&self) -> String {
        format!(
            "snap {} digest={} seed={} version={} outputs={}",
            self.command,
            self.config_digest,
            self.seed,
            self.tool_version,
            self.outputs.join(",")
        )
    }

    pub fn to_value(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("manifest serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn digest_is_stable_and_input_sensitive() {
        let a = RunManifest::new("build", b"{\"n\":16}", 0);
        let b = RunManifest::new("build", b"{\"n\":16}", 0);
        let c = RunManifest::new("build", b"{\"n\":17}", 0);
        assert_eq!(a, b);
        assert_ne!(a.config_digest, c.config_digest);
        assert_eq!(a.config_digest.len(), 64);
        assert!(a.header().contains(&a.config_digest));
    }
}
