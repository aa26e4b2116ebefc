//! Persistence: JSONL record streams, the binary checkpoint container, and
//! run manifests. Every write goes to a temporary file in the target
//! directory and is renamed into place.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::il::LabeledStep;
use crate::rollout::Trajectory;
use crate::router::{AnchorParams, Architecture, OptimizerState, RouterParams};

/// Version stamped on every JSONL record.
pub const SCHEMA_VERSION: u32 = 1;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"DCRCKPT\0";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Write `bytes` to `path` so that readers see either the old file or the
/// complete new one.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(path, e))?;
    tmp.as_file().sync_all().map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

pub fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

pub fn file_hash(path: &Path) -> Result<String> {
    Ok(sha256_hex(&read_bytes(path)?))
}

#[derive(Serialize)]
struct Line<'a, T> {
    schema_version: u32,
    #[serde(flatten)]
    record: &'a T,
}

/// One JSON object per line, each carrying `schema_version`.
pub fn encode_jsonl<T: Serialize>(records: &[T]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    for record in records {
        serde_json::to_writer(
            &mut out,
            &Line {
                schema_version: SCHEMA_VERSION,
                record,
            },
        )
        .map_err(|e| Error::Data(format!("serialization failed: {e}")))?;
        out.push(b'\n');
    }
    Ok(out)
}

pub fn decode_jsonl<T: DeserializeOwned>(path: &Path, bytes: &[u8]) -> Result<Vec<T>> {
    let text = std::str::from_utf8(bytes).map_err(|e| Error::CorruptLine {
        path: path.to_path_buf(),
        line: 1 + bytes[..e.valid_up_to()].iter().filter(|&&b| b == b'\n').count(),
        message: "invalid UTF-8".into(),
    })?;
    let corrupt = |line: usize, message: String| Error::CorruptLine {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let mut value: serde_json::Value =
            serde_json::from_str(raw).map_err(|e| corrupt(line, e.to_string()))?;
        let obj = value
            .as_object_mut()
            .ok_or_else(|| corrupt(line, "record is not a JSON object".into()))?;
        let version = obj
            .remove("schema_version")
            .and_then(|v| v.as_u64())
            .ok_or_else(|| corrupt(line, "missing schema_version".into()))?;
        if version != u64::from(SCHEMA_VERSION) {
            return Err(Error::SchemaVersion {
                path: path.to_path_buf(),
                found: u32::try_from(version).unwrap_or(u32::MAX),
                expected: SCHEMA_VERSION,
            });
        }
        out.push(serde_json::from_value(value).map_err(|e| corrupt(line, e.to_string()))?);
    }
    Ok(out)
}

pub fn save_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    write_atomic(path, &encode_jsonl(records)?)
}

pub fn load_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    decode_jsonl(path, &read_bytes(path)?)
}

pub fn save_trajectories(path: &Path, trajectories: &[Trajectory]) -> Result<()> {
    save_jsonl(path, trajectories)
}

pub fn load_trajectories(path: &Path) -> Result<Vec<Trajectory>> {
    load_jsonl(path)
}

pub fn save_dataset(path: &Path, steps: &[LabeledStep]) -> Result<()> {
    save_jsonl(path, steps)
}

pub fn load_dataset(path: &Path) -> Result<Vec<LabeledStep>> {
    load_jsonl(path)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckpointStage {
    Init,
    Il,
    Rl,
}

impl CheckpointStage {
    fn tag(self) -> u8 {
        match self {
            CheckpointStage::Init => 0,
            CheckpointStage::Il => 1,
            CheckpointStage::Rl => 2,
        }
    }

    fn from_tag(t: u8) -> Option<Self> {
        match t {
            0 => Some(CheckpointStage::Init),
            1 => Some(CheckpointStage::Il),
            2 => Some(CheckpointStage::Rl),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: RouterParams,
    pub optimizer: Option<OptimizerState>,
    pub anchor: Option<AnchorParams>,
    pub stage: CheckpointStage,
    /// SHA-256 of the effective config the checkpoint was trained under.
    pub config_hash: [u8; 32],
}

fn put_section(out: &mut Vec<u8>, tag: &[u8; 4], payload: &[u8]) {
    out.extend_from_slice(tag);
    out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
    out.extend_from_slice(payload);
}

fn f64s(values: &[f64], out: &mut Vec<u8>) {
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

/// Layout: magic, `u32` version, then sections `tag[4] | u64 len | payload`
/// in the order ARCH, PRMS, OPTM?, ANCH?, STAG, CHSH, END. All integers and
/// floats are little-endian.
pub fn encode_checkpoint(c: &Checkpoint) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    let arch = serde_json::to_vec(&c.params.arch)
        .map_err(|e| Error::Data(format!("architecture encoding failed: {e}")))?;
    put_section(&mut out, b"ARCH", &arch);
    let mut p = c.params.version.to_le_bytes().to_vec();
    f64s(&c.params.values, &mut p);
    put_section(&mut out, b"PRMS", &p);
    if let Some(o) = &c.optimizer {
        let mut b = o.step.to_le_bytes().to_vec();
        f64s(&[o.lr, o.weight_decay, o.beta1, o.beta2, o.eps], &mut b);
        f64s(&o.first_moment, &mut b);
        f64s(&o.second_moment, &mut b);
        put_section(&mut out, b"OPTM", &b);
    }
    if let Some(a) = &c.anchor {
        if a.params().arch != c.params.arch {
            return Err(Error::Usage("anchor and live parameters differ in shape".into()));
        }
        let mut b = Vec::new();
        f64s(&a.params().values, &mut b);
        put_section(&mut out, b"ANCH", &b);
    }
    put_section(&mut out, b"STAG", &[c.stage.tag()]);
    put_section(&mut out, b"CHSH", &c.config_hash);
    put_section(&mut out, b"END\0", &[]);
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn err(&self, message: impl Into<String>) -> Error {
        Error::CorruptCheckpoint {
            path: self.path.to_path_buf(),
            message: message.into(),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.err(format!("truncated at byte {}", self.bytes.len())));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        (0..n)
            .map(|_| Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes"))))
            .collect()
    }

    fn done(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(self.err("section has trailing bytes"));
        }
        Ok(())
    }
}

pub fn decode_checkpoint(path: &Path, bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { bytes, pos: 0, path };
    if r.take(8)? != CHECKPOINT_MAGIC {
        return Err(r.err("bad magic header"));
    }
    let version = u32::from_le_bytes(r.take(4)?.try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(Error::SchemaVersion {
            path: path.to_path_buf(),
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let mut sections: BTreeMap<[u8; 4], &[u8]> = BTreeMap::new();
    loop {
        let tag: [u8; 4] = r.take(4)?.try_into().expect("4 bytes");
        let len = usize::try_from(r.u64()?).map_err(|_| r.err("section too large"))?;
        let payload = r.take(len)?;
        if &tag == b"END\0" {
            break;
        }
        if sections.insert(tag, payload).is_some() {
            return Err(r.err(format!("duplicate section {}", String::from_utf8_lossy(&tag))));
        }
    }
    r.done()?;
    let need = |tag: &[u8; 4]| {
        sections.get(tag).copied().ok_or_else(|| Error::CorruptCheckpoint {
            path: path.to_path_buf(),
            message: format!("missing section {}", String::from_utf8_lossy(tag)),
        })
    };
    let sub = |b| Reader { bytes: b, pos: 0, path };
    let arch: Architecture = serde_json::from_slice(need(b"ARCH")?)
        .map_err(|e| r.err(format!("bad architecture: {e}")))?;
    arch.validate().map_err(|e| r.err(e.to_string()))?;
    let n = arch.param_count();
    let mut pr = sub(need(b"PRMS")?);
    let pversion = pr.u64()?;
    let values = pr.f64s(n)?;
    pr.done()?;
    let mut params = RouterParams::from_values(arch, values).map_err(|e| r.err(e.to_string()))?;
    params.version = pversion;
    let optimizer = match sections.get(b"OPTM") {
        None => None,
        Some(b) => {
            let mut o = sub(b);
            let step = o.u64()?;
            let h = o.f64s(5)?;
            let first_moment = o.f64s(n)?;
            let second_moment = o.f64s(n)?;
            o.done()?;
            Some(OptimizerState {
                first_moment,
                second_moment,
                step,
                lr: h[0],
                weight_decay: h[1],
                beta1: h[2],
                beta2: h[3],
                eps: h[4],
            })
        }
    };
    let anchor = match sections.get(b"ANCH") {
        None => None,
        Some(b) => {
            let mut a = sub(b);
            let values = a.f64s(n)?;
            a.done()?;
            Some(AnchorParams::freeze(
                &RouterParams::from_values(arch, values).map_err(|e| r.err(e.to_string()))?,
            ))
        }
    };
    let stage = match need(b"STAG")? {
        [t] => CheckpointStage::from_tag(*t).ok_or_else(|| r.err(format!("unknown stage tag {t}")))?,
        _ => return Err(r.err("bad stage section")),
    };
    let config_hash: [u8; 32] = need(b"CHSH")?
        .try_into()
        .map_err(|_| r.err("config hash must be 32 bytes"))?;
    Ok(Checkpoint {
        params,
        optimizer,
        anchor,
        stage,
        config_hash,
    })
}

pub fn save_checkpoint(path: &Path, c: &Checkpoint) -> Result<()> {
    write_atomic(path, &encode_checkpoint(c)?)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    decode_checkpoint(path, &read_bytes(path)?)
}

pub fn config_hash(effective_config: &str) -> [u8; 32] {
    Sha256::digest(effective_config.as_bytes()).into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArtifactEntry {
    /// Path relative to the run directory.
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub schema_version: u32,
    pub run_id: String,
    pub config_hash: String,
    pub stages: Vec<String>,
    pub seed: u64,
    pub eval_seeds: Vec<u64>,
    pub inputs: Vec<ArtifactEntry>,
    pub outputs: Vec<ArtifactEntry>,
    /// Seconds since the Unix epoch; `SOURCE_DATE_EPOCH` overrides the clock.
    pub started_unix: u64,
    pub finished_unix: u64,
}

pub fn unix_now() -> u64 {
    if let Some(v) = std::env::var("SOURCE_DATE_EPOCH").ok().and_then(|s| s.parse().ok()) {
        return v;
    }
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map_or(0, |d| d.as_secs())
}

/// Hash the listed files (relative to `root`) into manifest entries.
pub fn hash_artifacts(root: &Path, rel: &[PathBuf]) -> Result<Vec<ArtifactEntry>> {
    rel.iter()
        .map(|p| {
            Ok(ArtifactEntry {
                path: p.to_string_lossy().replace('\\', "/"),
                sha256: file_hash(&root.join(p))?,
            })
        })
        .collect()
}

impl RunManifest {
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut bytes = serde_json::to_vec_pretty(self)
            .map_err(|e| Error::Data(format!("manifest encoding failed: {e}")))?;
        bytes.push(b'\n');
        write_atomic(path, &bytes)
    }

    pub fn load(path: &Path) -> Result<RunManifest> {
        serde_json::from_slice(&read_bytes(path)?)
            .map_err(|e| Error::Data(format!("{}: bad manifest: {e}", path.display())))
    }

    /// Every output must exist and match its recorded hash; inputs are
    /// checked when still present.
    pub fn verify(&self, root: &Path) -> Result<()> {
        for (a, required) in self
            .outputs
            .iter()
            .map(|a| (a, true))
            .chain(self.inputs.iter().map(|a| (a, false)))
        {
            let p = root.join(&a.path);
            if !p.exists() {
                if required {
                    return Err(Error::Data(format!("manifest output {} is missing", a.path)));
                }
                continue;
            }
            let h = file_hash(&p)?;
            if h != a.sha256 {
                return Err(Error::Data(format!(
                    "{} hash {h} does not match manifest {}",
                    a.path, a.sha256
                )));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed;

    fn arch() -> Architecture {
        Architecture::mlp(3, 2)
    }

    fn ckpt() -> Checkpoint {
        let params = RouterParams::init(arch(), &mut seed::stream(4, &[]));
        Checkpoint {
            anchor: Some(AnchorParams::freeze(&params)),
            optimizer: Some(OptimizerState::new(params.len(), 1e-5, 0.01)),
            params,
            stage: CheckpointStage::Il,
            config_hash: [7; 32],
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let c = ckpt();
        let bytes = encode_checkpoint(&c).unwrap();
        assert_eq!(decode_checkpoint(Path::new("x"), &bytes).unwrap(), c);
        let bare = Checkpoint {
            optimizer: None,
            anchor: None,
            ..c
        };
        let bytes = encode_checkpoint(&bare).unwrap();
        assert_eq!(decode_checkpoint(Path::new("x"), &bytes).unwrap(), bare);
    }

    #[test]
    fn truncated_checkpoint_is_corrupt() {
        let bytes = encode_checkpoint(&ckpt()).unwrap();
        for cut in [0, 5, 12, 40, bytes.len() - 1] {
            assert!(matches!(
                decode_checkpoint(Path::new("x"), &bytes[..cut]),
                Err(Error::CorruptCheckpoint { .. })
            ));
        }
        let mut bad = bytes.clone();
        bad[8] = 9;
        assert!(matches!(
            decode_checkpoint(Path::new("x"), &bad),
            Err(Error::SchemaVersion { found: 9, .. })
        ));
    }

    #[test]
    fn golden_checkpoint_layout() {
        let params = RouterParams::from_values(Architecture::Linear { inputs: 1 }, vec![1.5, -0.25]).unwrap();
        let c = Checkpoint {
            params,
            optimizer: None,
            anchor: None,
            stage: CheckpointStage::Rl,
            config_hash: [0xab; 32],
        };
        let got = encode_checkpoint(&c).unwrap();
        let mut want: Vec<u8> = b"DCRCKPT\0".to_vec();
        want.extend([1, 0, 0, 0]);
        let arch = br#"{"kind":"linear","inputs":1}"#;
        want.extend(b"ARCH");
        want.extend((arch.len() as u64).to_le_bytes());
        want.extend(arch);
        want.extend(b"PRMS");
        want.extend(24u64.to_le_bytes());
        want.extend(0u64.to_le_bytes());
        want.extend([0, 0, 0, 0, 0, 0, 0xf8, 0x3f]);
        want.extend([0, 0, 0, 0, 0, 0, 0xd0, 0xbf]);
        want.extend(b"STAG");
        want.extend(1u64.to_le_bytes());
        want.push(2);
        want.extend(b"CHSH");
        want.extend(32u64.to_le_bytes());
        want.extend([0xab; 32]);
        want.extend(b"END\0");
        want.extend(0u64.to_le_bytes());
        assert_eq!(got, want);
    }

    #[test]
    fn jsonl_errors_name_the_line() {
        let bytes = b"{\"schema_version\":1,\"a\":1}\nnot json\n";
        #[derive(Deserialize, Debug)]
        #[allow(dead_code)]
        struct A {
            a: u32,
        }
        match decode_jsonl::<A>(Path::new("f"), bytes) {
            Err(Error::CorruptLine { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
        let bytes = b"{\"schema_version\":2,\"a\":1}\n";
        assert!(matches!(
            decode_jsonl::<A>(Path::new("f"), bytes),
            Err(Error::SchemaVersion { found: 2, .. })
        ));
        assert!(decode_jsonl::<A>(Path::new("f"), b"").unwrap().is_empty());
    }

    #[test]
    fn atomic_write_replaces_whole_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("sub/a.txt");
        write_atomic(&p, b"first").unwrap();
        write_atomic(&p, b"second").unwrap();
        assert_eq!(fs::read(&p).unwrap(), b"second");
        assert_eq!(fs::read_dir(p.parent().unwrap()).unwrap().count(), 1);
    }
}
