//! On-disk dataset: a human-readable manifest plus one binary record file
//! per scenario.
//!
//! Manifest (`manifest.txt`, line oriented `key=value`):
//!
//! ```text
//! version=bevplan.dataset.v1
//! split=train
//! master_seed=42
//! world.grid_size=64
//! world.cell_size=0.5
//! world.rate_hz=2
//! world.history_len=4
//! world.future_len=8
//! world.num_classes=4
//! world.max_agents=4
//! scenario=<id>        (one line per record, in order)
//! ```
//!
//! Record files (`<id>.rec`, little-endian):
//!
//! ```text
//! magic    8 bytes  "BEVPREC1"
//! id_len   u32      followed by id bytes (utf-8)
//! template u8
//! dims     6 x u32  H, W, T_h, T_f, max_agents, num_classes
//! bev_current    H*W            u8, row-major
//! bev_future     T_f*H*W        u8
//! history        T_h*2          f64
//! gt_future      T_f*2          f64
//! ego_status     7              f64
//! agents         max_agents*5   f64
//! agents_future  T_f*max_agents*5 f64
//! checksum u64    FNV-1a over every preceding byte
//! ```

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2, Array3};
use thiserror::Error;

use super::{ScenarioRecord, Template, WorldSpec};
use crate::util::fnv1a;

pub const MANIFEST_VERSION: &str = "bevplan.dataset.v1";
pub const MANIFEST_FILE: &str = "manifest.txt";
const RECORD_MAGIC: &[u8; 8] = b"BEVPREC1";

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("format error: {0}")]
    Format(String),
    #[error("unsupported dataset version `{0}` (expected {MANIFEST_VERSION})")]
    Version(String),
    #[error("integrity error for scenario `{id}`: {detail}")]
    Integrity { id: String, detail: String },
}

fn io_err(path: &Path, source: std::io::Error) -> DatasetError {
    DatasetError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn from_str(s: &str) -> Option<Split> {
        match s {
            "train" => Some(Split::Train),
            "val" => Some(Split::Val),
            "test" => Some(Split::Test),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub version: String,
    pub world_spec: WorldSpec,
    pub split: Split,
    pub scenario_ids: Vec<String>,
    pub master_seed: u64,
}

impl DatasetManifest {
    pub fn new(world_spec: WorldSpec, split: Split, master_seed: u64) -> Self {
        Self {
            version: MANIFEST_VERSION.to_string(),
            world_spec,
            split,
            scenario_ids: Vec::new(),
            master_seed,
        }
    }

    pub fn to_text(&self) -> String {
        let w = &self.world_spec;
        let mut out = String::new();
        out.push_str("# bevplan dataset manifest\n");
        out.push_str(&format!("version={}\n", self.version));
        out.push_str(&format!("split={}\n", self.split.as_str()));
        out.push_str(&format!("master_seed={}\n", self.master_seed));
        out.push_str(&format!("world.grid_size={}\n", w.grid_size));
        out.push_str(&format!("world.cell_size={}\n", w.cell_size));
        out.push_str(&format!("world.rate_hz={}\n", w.rate_hz));
        out.push_str(&format!("world.history_len={}\n", w.history_len));
        out.push_str(&format!("world.future_len={}\n", w.future_len));
        out.push_str(&format!("world.num_classes={}\n", w.num_classes));
        out.push_str(&format!("world.max_agents={}\n", w.max_agents));
        for id in &self.scenario_ids {
            out.push_str(&format!("scenario={id}\n"));
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self, DatasetError> {
        let mut version = None;
        let mut split = None;
        let mut master_seed = None;
        let mut ids = Vec::new();
        let mut spec = WorldSpec::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                DatasetError::Format(format!("line {}: expected key=value", lineno + 1))
            })?;
            let bad = |what: &str| DatasetError::Format(format!("bad {what}: `{value}`"));
            match key {
                "version" => version = Some(value.to_string()),
                "split" => {
                    split = Some(Split::from_str(value).ok_or_else(|| bad("split"))?);
                }
                "master_seed" => {
                    master_seed = Some(value.parse().map_err(|_| bad("master_seed"))?);
                }
                "world.grid_size" => spec.grid_size = value.parse().map_err(|_| bad(key))?,
                "world.cell_size" => spec.cell_size = value.parse().map_err(|_| bad(key))?,
                "world.rate_hz" => spec.rate_hz = value.parse().map_err(|_| bad(key))?,
                "world.history_len" => spec.history_len = value.parse().map_err(|_| bad(key))?,
                "world.future_len" => spec.future_len = value.parse().map_err(|_| bad(key))?,
                "world.num_classes" => spec.num_classes = value.parse().map_err(|_| bad(key))?,
                "world.max_agents" => spec.max_agents = value.parse().map_err(|_| bad(key))?,
                "scenario" => ids.push(value.to_string()),
                other => {
                    return Err(DatasetError::Format(format!("unknown manifest key `{other}`")))
                }
            }
        }
        let version = version.ok_or_else(|| DatasetError::Format("missing version".into()))?;
        if version != MANIFEST_VERSION {
            return Err(DatasetError::Version(version));
        }
        let mut seen = std::collections::HashSet::new();
        for id in &ids {
            if !seen.insert(id.clone()) {
                return Err(DatasetError::Format(format!("duplicate scenario id `{id}`")));
            }
        }
        Ok(Self {
            version,
            world_spec: spec,
            split: split.ok_or_else(|| DatasetError::Format("missing split".into()))?,
            scenario_ids: ids,
            master_seed: master_seed
                .ok_or_else(|| DatasetError::Format("missing master_seed".into()))?,
        })
    }
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
    id: &'a str,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], DatasetError> {
        if self.pos + n > self.buf.len() {
            return Err(DatasetError::Integrity {
                id: self.id.to_string(),
                detail: "record truncated".into(),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, DatasetError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u8(&mut self) -> Result<u8, DatasetError> {
        Ok(self.take(1)?[0])
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>, DatasetError> {
        let raw = self.take(8 * n)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

pub fn encode_record(rec: &ScenarioRecord) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(RECORD_MAGIC);
    let id = rec.scenario_id.as_bytes();
    out.extend_from_slice(&(id.len() as u32).to_le_bytes());
    out.extend_from_slice(id);
    out.push(rec.template.tag());
    let (tf, h, w) = rec.bev_future.dim();
    let (th, _) = rec.history.dim();
    let (max_agents, _) = rec.agents.dim();
    let num_classes = 1 + *rec.bev_current.iter().max().unwrap_or(&3).max(&3) as u32;
    for v in [
        h as u32,
        w as u32,
        th as u32,
        tf as u32,
        max_agents as u32,
        num_classes,
    ] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.extend(rec.bev_current.iter().copied());
    out.extend(rec.bev_future.iter().copied());
    for &v in rec.history.iter() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for &v in rec.gt_future.iter() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for &v in rec.ego_status.iter() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for &v in rec.agents.iter() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for &v in rec.agents_future.iter() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    let checksum = fnv1a(&out);
    out.extend_from_slice(&checksum.to_le_bytes());
    out
}

pub fn decode_record(bytes: &[u8], expect_id: &str) -> Result<ScenarioRecord, DatasetError> {
    let integrity = |detail: &str| DatasetError::Integrity {
        id: expect_id.to_string(),
        detail: detail.to_string(),
    };
    if bytes.len() < RECORD_MAGIC.len() + 8 {
        return Err(integrity("record too short"));
    }
    let (payload, tail) = bytes.split_at(bytes.len() - 8);
    let stored = u64::from_le_bytes(tail.try_into().unwrap());
    if fnv1a(payload) != stored {
        return Err(integrity("checksum mismatch"));
    }
    let mut cur = Cursor {
        buf: payload,
        pos: 0,
        id: expect_id,
    };
    if cur.take(8)? != RECORD_MAGIC {
        return Err(integrity("bad magic"));
    }
    let id_len = cur.u32()? as usize;
    let id = String::from_utf8(cur.take(id_len)?.to_vec())
        .map_err(|_| integrity("id is not utf-8"))?;
    if id != expect_id {
        return Err(integrity(&format!("stored id `{id}` does not match")));
    }
    let template =
        Template::from_tag(cur.u8()?).ok_or_else(|| integrity("unknown template tag"))?;
    let h = cur.u32()? as usize;
    let w = cur.u32()? as usize;
    let th = cur.u32()? as usize;
    let tf = cur.u32()? as usize;
    let max_agents = cur.u32()? as usize;
    let _num_classes = cur.u32()? as usize;

    let bev_current = Array2::from_shape_vec((h, w), cur.take(h * w)?.to_vec())
        .map_err(|_| integrity("bev_current shape"))?;
    let bev_future = Array3::from_shape_vec((tf, h, w), cur.take(tf * h * w)?.to_vec())
        .map_err(|_| integrity("bev_future shape"))?;
    let history = Array2::from_shape_vec((th, 2), cur.f64s(th * 2)?)
        .map_err(|_| integrity("history shape"))?;
    let gt_future = Array2::from_shape_vec((tf, 2), cur.f64s(tf * 2)?)
        .map_err(|_| integrity("gt_future shape"))?;
    let ego_status = Array1::from(cur.f64s(7)?);
    let agents = Array2::from_shape_vec((max_agents, 5), cur.f64s(max_agents * 5)?)
        .map_err(|_| integrity("agents shape"))?;
    let agents_future =
        Array3::from_shape_vec((tf, max_agents, 5), cur.f64s(tf * max_agents * 5)?)
            .map_err(|_| integrity("agents_future shape"))?;
    Ok(ScenarioRecord {
        scenario_id: id,
        template,
        bev_current,
        bev_future,
        history,
        gt_future,
        ego_status,
        agents,
        agents_future,
    })
}

/// Write records plus manifest under `root`. The manifest's scenario id
/// list is rebuilt from the records in order.
pub fn write_dataset(
    records: &[ScenarioRecord],
    manifest: &mut DatasetManifest,
    root: &Path,
) -> Result<(), DatasetError> {
    fs::create_dir_all(root).map_err(|e| io_err(root, e))?;
    manifest.scenario_ids = records.iter().map(|r| r.scenario_id.clone()).collect();
    for rec in records {
        let path = root.join(format!("{}.rec", rec.scenario_id));
        let mut f = fs::File::create(&path).map_err(|e| io_err(&path, e))?;
        f.write_all(&encode_record(rec)).map_err(|e| io_err(&path, e))?;
    }
    let mpath = root.join(MANIFEST_FILE);
    fs::write(&mpath, manifest.to_text()).map_err(|e| io_err(&mpath, e))?;
    Ok(())
}

pub fn read_manifest(root: &Path) -> Result<DatasetManifest, DatasetError> {
    let mpath = root.join(MANIFEST_FILE);
    let text = fs::read_to_string(&mpath).map_err(|e| io_err(&mpath, e))?;
    DatasetManifest::from_text(&text)
}

pub fn read_record(root: &Path, id: &str) -> Result<ScenarioRecord, DatasetError> {
    let path = root.join(format!("{id}.rec"));
    let mut buf = Vec::new();
    match fs::File::open(&path) {
        Ok(mut f) => {
            f.read_to_end(&mut buf).map_err(|e| io_err(&path, e))?;
        }
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            return Err(DatasetError::Integrity {
                id: id.to_string(),
                detail: "record file missing".into(),
            });
        }
        Err(e) => return Err(io_err(&path, e)),
    }
    decode_record(&buf, id)
}

/// Load the manifest and return it with a lazy record iterator.
pub fn read_dataset(
    root: &Path,
) -> Result<
    (
        DatasetManifest,
        impl Iterator<Item = Result<ScenarioRecord, DatasetError>> + '_,
    ),
    DatasetError,
> {
    let manifest = read_manifest(root)?;
    let ids = manifest.scenario_ids.clone();
    let iter = ids.into_iter().map(move |id| read_record(root, &id));
    Ok((manifest, iter))
}

/// Load every record eagerly.
pub fn read_all(root: &Path) -> Result<(DatasetManifest, Vec<ScenarioRecord>), DatasetError> {
    let (manifest, iter) = read_dataset(root)?;
    let mut records = Vec::new();
    for r in iter {
        records.push(r?);
    }
    Ok((manifest, records))
}

/// FNV-1a digest of every file in a directory (sorted by name). Used to
/// assert read-only evaluation.
pub fn dir_digest(root: &Path) -> Result<u64, DatasetError> {
    let mut names: Vec<PathBuf> = fs::read_dir(root)
        .map_err(|e| io_err(root, e))?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.is_file())
        .collect();
    names.sort();
    let mut acc = Vec::new();
    for p in names {
        acc.extend_from_slice(p.file_name().unwrap().to_string_lossy().as_bytes());
        let bytes = fs::read(&p).map_err(|e| io_err(&p, e))?;
        acc.extend_from_slice(&bytes);
    }
    Ok(fnv1a(&acc))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenario::{generate_scenario, Template};
    use tempfile::tempdir;

    fn sample_records(n: u64) -> (WorldSpec, Vec<ScenarioRecord>) {
        let spec = WorldSpec::default();
        let recs = (0..n)
            .map(|i| {
                let template = Template::ALL[(i % 4) as usize];
                generate_scenario(&spec, template, 100 + i).unwrap()
            })
            .collect();
        (spec, recs)
    }

    #[test]
    fn round_trip_identity() {
        let dir = tempdir().unwrap();
        let (spec, recs) = sample_records(10);
        let mut manifest = DatasetManifest::new(spec, Split::Train, 42);
        write_dataset(&recs, &mut manifest, dir.path()).unwrap();
        let (m2, loaded) = read_all(dir.path()).unwrap();
        assert_eq!(manifest, m2);
        assert_eq!(recs.len(), loaded.len());
        for (a, b) in recs.iter().zip(loaded.iter()) {
            assert_eq!(a, b, "record {} must round-trip exactly", a.scenario_id);
        }
    }

    #[test]
    fn corrupt_record_is_an_integrity_error_naming_the_id() {
        let dir = tempdir().unwrap();
        let (spec, recs) = sample_records(3);
        let mut manifest = DatasetManifest::new(spec, Split::Train, 42);
        write_dataset(&recs, &mut manifest, dir.path()).unwrap();
        let victim = &recs[1].scenario_id;
        let path = dir.path().join(format!("{victim}.rec"));
        let mut bytes = fs::read(&path).unwrap();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0xff;
        fs::write(&path, bytes).unwrap();
        let err = read_record(dir.path(), victim).unwrap_err();
        match err {
            DatasetError::Integrity { id, .. } => assert_eq!(&id, victim),
            other => panic!("expected integrity error, got {other}"),
        }
    }

    #[test]
    fn missing_record_is_an_integrity_error() {
        let dir = tempdir().unwrap();
        let (spec, recs) = sample_records(2);
        let mut manifest = DatasetManifest::new(spec, Split::Train, 42);
        write_dataset(&recs, &mut manifest, dir.path()).unwrap();
        fs::remove_file(dir.path().join(format!("{}.rec", recs[0].scenario_id))).unwrap();
        let (_, mut iter) = read_dataset(dir.path()).unwrap();
        let err = iter.next().unwrap().unwrap_err();
        assert!(matches!(err, DatasetError::Integrity { .. }));
    }

    #[test]
    fn unknown_version_is_a_format_error() {
        let dir = tempdir().unwrap();
        let (spec, recs) = sample_records(1);
        let mut manifest = DatasetManifest::new(spec, Split::Train, 42);
        write_dataset(&recs, &mut manifest, dir.path()).unwrap();
        let mpath = dir.path().join(MANIFEST_FILE);
        let text = fs::read_to_string(&mpath)
            .unwrap()
            .replace(MANIFEST_VERSION, "bevplan.dataset.v999");
        fs::write(&mpath, text).unwrap();
        let err = read_manifest(dir.path()).unwrap_err();
        assert!(matches!(err, DatasetError::Version(_)));
    }

    #[test]
    fn manifest_round_trips_textually() {
        let (spec, _) = sample_records(0);
        let mut m = DatasetManifest::new(spec, Split::Val, 7);
        m.scenario_ids = vec!["a".into(), "b".into()];
        let text = m.to_text();
        let parsed = DatasetManifest::from_text(&text).unwrap();
        assert_eq!(m, parsed);
        assert_eq!(parsed.to_text(), text);
    }
}
