//! Run manifests: one TOML record per CLI invocation.
//!
//! A manifest pins everything needed to replay or audit a run: the resolved
//! configuration snapshot, the seed, fingerprints of every artifact read and
//! written, wall-clock duration, and the tool version. Manifests are written
//! even when the run fails, with the error category and message in place of
//! the outputs.

use std::fs;
use std::path::{Path, PathBuf};

use actrev::fingerprint::FingerprintBuilder;
use actrev::{Error, Result};
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;

pub const MANIFEST_KIND: &str = "actrev-manifest";
pub const MANIFEST_VERSION: u32 = 1;
pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

/// A file the run consumed or produced, pinned by content fingerprint.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArtifactRecord {
    pub path: String,
    pub fingerprint: String,
}

/// Terminal state of the run.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "kebab-case")]
pub enum RunOutcome {
    Success,
    Failure { category: String, message: String },
}

/// Everything recorded about one subcommand invocation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub subcommand: String,
    /// Master seed if `--seed` was given; section seeds then derive from it.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    pub duration_ms: u64,
    pub outcome: RunOutcome,
    pub inputs: Vec<ArtifactRecord>,
    pub outputs: Vec<ArtifactRecord>,
    /// Effective configuration after file loading and flag overrides.
    pub config: ExperimentConfig,
}

/// Wrapper carrying the format header. `flatten` is incompatible with
/// `deny_unknown_fields`, so the header is checked by hand on load.
#[derive(Serialize, Deserialize)]
struct ManifestFile {
    format: String,
    version: u32,
    #[serde(flatten)]
    manifest: RunManifest,
}

/// Content fingerprint of a file on disk.
pub fn fingerprint_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut fp = FingerprintBuilder::new("artifact-file");
    fp.bytes(&bytes);
    Ok(fp.finish())
}

/// Fingerprints a path into an [`ArtifactRecord`].
pub fn record_artifact(path: &Path) -> Result<ArtifactRecord> {
    Ok(ArtifactRecord {
        path: path.display().to_string(),
        fingerprint: fingerprint_file(path)?,
    })
}

/// Writes the manifest under `<out_dir>/manifests/` with a fresh sequence
/// number and returns the path used.
pub fn save_manifest(out_dir: &Path, manifest: &RunManifest) -> Result<PathBuf> {
    let dir = out_dir.join("manifests");
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let mut index = 1usize;
    for entry in fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))? {
        let entry = entry.map_err(|e| Error::io(&dir, e))?;
        let name = entry.file_name();
        let name = name.to_string_lossy();
        if let Some(n) = name
            .strip_prefix("run-")
            .and_then(|rest| rest.split_once('-'))
            .and_then(|(num, _)| num.parse::<usize>().ok())
        {
            index = index.max(n + 1);
        }
    }
    let path = dir.join(format!("run-{index:04}-{}.toml", manifest.subcommand));
    let file = ManifestFile {
        format: MANIFEST_KIND.into(),
        version: MANIFEST_VERSION,
        manifest: manifest.clone(),
    };
    let text = toml::to_string_pretty(&file).map_err(|e| Error::MalformedFile {
        kind: "manifest",
        path: Some(path.clone()),
        reason: e.to_string(),
    })?;
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

/// Reads a manifest back, checking the format header.
pub fn load_manifest(path: &Path) -> Result<RunManifest> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let file: ManifestFile = toml::from_str(&text).map_err(|e| Error::MalformedFile {
        kind: "manifest",
        path: Some(path.to_path_buf()),
        reason: e.to_string(),
    })?;
    if file.format != MANIFEST_KIND {
        return Err(Error::MalformedFile {
            kind: "manifest",
            path: Some(path.to_path_buf()),
            reason: format!("format is {:?}, expected {MANIFEST_KIND:?}", file.format),
        });
    }
    if file.version != MANIFEST_VERSION {
        return Err(Error::UnsupportedVersion {
            kind: "manifest",
            found: file.version,
            supported: MANIFEST_VERSION,
        });
    }
    Ok(file.manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn example(subcommand: &str, outcome: RunOutcome) -> RunManifest {
        RunManifest {
            tool_version: TOOL_VERSION.into(),
            subcommand: subcommand.into(),
            seed: Some(5),
            duration_ms: 12,
            outcome,
            inputs: vec![ArtifactRecord {
                path: "corpus.toml".into(),
                fingerprint: "abc".into(),
            }],
            outputs: vec![],
            config: ExperimentConfig::default(),
        }
    }

    #[test]
    fn manifests_round_trip_and_number_sequentially() {
        let dir = tempfile::tempdir().unwrap();
        let first = save_manifest(dir.path(), &example("gen-data", RunOutcome::Success)).unwrap();
        assert!(first.ends_with("manifests/run-0001-gen-data.toml"));
        let failure = RunOutcome::Failure {
            category: "invalid-config".into(),
            message: "bad field".into(),
        };
        let second = save_manifest(dir.path(), &example("eval", failure.clone())).unwrap();
        assert!(second.ends_with("manifests/run-0002-eval.toml"));

        let loaded = load_manifest(&second).unwrap();
        assert_eq!(loaded.outcome, failure);
        assert_eq!(loaded.config, ExperimentConfig::default());
        assert_eq!(loaded, example("eval", loaded.outcome.clone()));
    }

    #[test]
    fn file_fingerprints_track_content() {
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a.txt");
        let b = dir.path().join("b.txt");
        fs::write(&a, "same").unwrap();
        fs::write(&b, "same").unwrap();
        assert_eq!(
            fingerprint_file(&a).unwrap(),
            fingerprint_file(&b).unwrap()
        );
        fs::write(&b, "different").unwrap();
        assert_ne!(
            fingerprint_file(&a).unwrap(),
            fingerprint_file(&b).unwrap()
        );
        assert!(matches!(
            fingerprint_file(&dir.path().join("missing.txt")),
            Err(Error::Io { .. })
        ));
    }

    #[test]
    fn foreign_format_and_version_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.toml");
        let saved = save_manifest(dir.path(), &example("probe", RunOutcome::Success)).unwrap();
        let mut text = fs::read_to_string(&saved).unwrap();
        text = text.replace("version = 1", "version = 9");
        fs::write(&path, &text).unwrap();
        assert!(matches!(
            load_manifest(&path),
            Err(Error::UnsupportedVersion { .. })
        ));
        let text = text.replace("actrev-manifest", "other-tool");
        fs::write(&path, text.replace("version = 9", "version = 1")).unwrap();
        assert!(matches!(
            load_manifest(&path),
            Err(Error::MalformedFile { .. })
        ));
    }
}
