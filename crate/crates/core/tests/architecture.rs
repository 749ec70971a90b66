//! Static audit: nothing reachable from the training loop can draw samples
//! from the teacher mixture. The trainer sees the teacher only through
//! `ScoreOracle` mean queries; mixture sampling lives in `sfd-lab`, which this
//! crate must not depend on.

use std::fs;
use std::path::{Path, PathBuf};

const FORBIDDEN_CRATES: [&str; 2] = ["sfd-lab", "sfd-cli"];

/// Tokens that only appear in code sampling from a mixture.
const FORBIDDEN_TOKENS: [&str; 6] = [
    "sfd_lab",
    "sfd_cli",
    "WeightedIndex",
    "cholesky",
    "sample_class",
    "sample_labelled",
];

/// The core crate root, also when this file is compiled into another crate's tests.
pub fn core_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core")
}

fn rust_files(dir: &Path, out: &mut Vec<PathBuf>) {
    for entry in fs::read_dir(dir).unwrap() {
        let p = entry.unwrap().path();
        if p.is_dir() {
            rust_files(&p, out);
        } else if p.extension().is_some_and(|e| e == "rs") {
            out.push(p);
        }
    }
}

fn token_violations(name: &str, text: &str) -> Vec<String> {
    let mut v = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let code = line.split("//").next().unwrap_or("");
        for tok in FORBIDDEN_TOKENS {
            if code.contains(tok) {
                v.push(format!("{name}:{}: `{tok}`", i + 1));
            }
        }
    }
    v
}

/// The mixture type exposes densities and scores but no sampler, and the
/// module carrying it takes no random source.
fn mixture_violations(name: &str, text: &str) -> Vec<String> {
    let mut v = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let code = line.split("//").next().unwrap_or("");
        if code.contains("use rand") || code.contains("Rng") || code.contains("fn sample") {
            v.push(format!("{name}:{}: {}", i + 1, code.trim()));
        }
    }
    v
}

/// The trainer reaches the teacher only through the oracle trait.
fn trainer_violations(name: &str, text: &str) -> Vec<String> {
    let mut v = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let code = line.split("//").next().unwrap_or("");
        if code.contains("GmmSpec") || code.contains("diffused_score") || code.contains("posterior_mean") {
            v.push(format!("{name}:{}: {}", i + 1, code.trim()));
        }
    }
    v
}

fn dependency_violations(manifest: &str) -> Vec<String> {
    let doc: toml::Table = manifest.parse().unwrap();
    let mut v = Vec::new();
    for section in ["dependencies", "dev-dependencies", "build-dependencies"] {
        if let Some(deps) = doc.get(section).and_then(|d| d.as_table()) {
            for krate in FORBIDDEN_CRATES {
                if deps.contains_key(krate) {
                    v.push(format!("[{section}] {krate}"));
                }
            }
        }
    }
    v
}

pub fn audit(root: &Path) -> Vec<String> {
    let mut v = dependency_violations(&fs::read_to_string(root.join("Cargo.toml")).unwrap());
    let mut files = Vec::new();
    rust_files(&root.join("src"), &mut files);
    assert!(files.len() > 5);
    for f in &files {
        let name = f.strip_prefix(root).unwrap().display().to_string();
        let text = fs::read_to_string(f).unwrap();
        v.extend(token_violations(&name, &text));
        match f.file_name().and_then(|n| n.to_str()) {
            Some("gmm.rs") => v.extend(mixture_violations(&name, &text)),
            Some("trainer.rs") => v.extend(trainer_violations(&name, &text)),
            _ => {}
        }
    }
    v
}

#[test]
fn training_loop_has_no_path_to_teacher_sampling() {
    let v = audit(&core_dir());
    assert!(v.is_empty(), "data-free violations:\n{}", v.join("\n"));
}

#[test]
fn audit_catches_planted_violations() {
    assert_eq!(
        dependency_violations("[package]\nname = \"x\"\n[dependencies]\nsfd-lab = { path = \"../lab\" }\n").len(),
        1
    );
    assert!(dependency_violations("[dependencies]\nrand = \"0.9\"\n").is_empty());
    assert_eq!(token_violations("t.rs", "use sfd_lab::sampling::sample_class;").len(), 2);
    assert!(token_violations("t.rs", "// cholesky mentioned in a comment").is_empty());
    assert_eq!(mixture_violations("gmm.rs", "pub fn sample<R: Rng>(&self, rng: &mut R) {}").len(), 1);
    assert_eq!(trainer_violations("trainer.rs", "let s = spec.diffused_score(&z, c, level);").len(), 1);
}
