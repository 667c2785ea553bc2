use std::path::{Path, PathBuf};
use std::time::Duration;

use sha2::{Digest, Sha256};

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Record of one `qk` invocation, written as `key: value` lines.
///
/// Everything except `wall_clock_ms` is a function of the command line and
/// the input file contents.
#[derive(Debug, Clone)]
pub struct RunManifest {
    pub command: String,
    pub config_hash: String,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
    pub wall_clock: Duration,
    pub status: String,
}

impl RunManifest {
    /// `config` is a canonical rendering of the parsed arguments.
    pub fn new(command: &str, config: &str, inputs: Vec<PathBuf>, outputs: Vec<PathBuf>) -> Self {
        Self {
            command: command.into(),
            config_hash: sha256_hex(config.as_bytes()),
            inputs,
            outputs,
            wall_clock: Duration::ZERO,
            status: String::new(),
        }
    }

    /// Manifest location when none is given: next to the first output, or
    /// `qk-<command>.manifest` in the working directory.
    pub fn default_path(&self) -> PathBuf {
        match self.outputs.first() {
            Some(p) => {
                let mut s = p.clone().into_os_string();
                s.push(".manifest");
                s.into()
            }
            None => PathBuf::from(format!("qk-{}.manifest", self.command)),
        }
    }

    pub fn to_text(&self) -> String {
        let mut out = format!(
            "command: {}\nversion: {}\nconfig_hash: {}\n",
            self.command,
            qkit_core::VERSION,
            self.config_hash
        );
        for p in &self.inputs {
            let digest = std::fs::read(p)
                .map(|b| sha256_hex(&b))
                .unwrap_or_else(|_| "unreadable".into());
            out += &format!("input: {} sha256={digest}\n", p.display());
        }
        for p in &self.outputs {
            out += &format!("output: {}\n", p.display());
        }
        out += &format!(
            "wall_clock_ms: {}\nstatus: {}\n",
            self.wall_clock.as_millis(),
            self.status
        );
        out
    }

    pub fn write(&self, path: &Path) -> std::io::Result<()> {
        std::fs::write(path, self.to_text())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sha256_known_vector() {
        assert_eq!(
            sha256_hex(b"abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }

    #[test]
    fn default_path_follows_first_output() {
        let m = RunManifest::new("ptq", "x", vec![], vec!["out/r.txt".into()]);
        assert_eq!(m.default_path(), PathBuf::from("out/r.txt.manifest"));
        let m = RunManifest::new("eval", "x", vec![], vec![]);
        assert_eq!(m.default_path(), PathBuf::from("qk-eval.manifest"));
    }

    #[test]
    fn text_lists_every_path() {
        let mut m = RunManifest::new("eval", "cfg", vec!["/nonexistent".into()], vec![]);
        m.status = "ok".into();
        let t = m.to_text();
        assert!(t.contains("input: /nonexistent sha256=unreadable\n"));
        assert!(t.contains(&format!("config_hash: {}\n", sha256_hex(b"cfg"))));
        assert!(t.ends_with("status: ok\n"));
    }
}
