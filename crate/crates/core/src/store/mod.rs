//! Bit-exact cache of fused and ego-only embeddings.
//!
//! Every frame of every scenario is encoded once with the frozen base model;
//! temporal training then reads embeddings instead of re-running the encoder.
//! See [`format`] for the on-disk layout.

pub mod format;

use std::fs;
use std::io::{Read, Seek, SeekFrom};
use std::path::{Path, PathBuf};

use ndarray::{Array3, Zip};

use crate::base::{fuse_agents, BaseModel};
use crate::error::{Error, Result};
use crate::fsutil::{promote_dir, staging_dir};
use crate::nn::digest;
use crate::objectives::GroundTruthMap;
use crate::world::{agent_observation, comm_schedule, ground_truth_map, Scenario, WorldConfig};
use format::*;

#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingRecord {
    pub scenario_id: u64,
    pub frame_index: i64,
    pub ego_id: u32,
    /// CAVs whose embeddings reached the ego, the ego included.
    pub n_cavs_available: u32,
    pub fused: Array3<f32>,
    pub ego_only: Array3<f32>,
    pub gt: GroundTruthMap,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum FrameSource {
    Fused,
    EgoOnly,
}

#[derive(Clone, Debug)]
pub struct SequenceFrame {
    pub frame_index: i64,
    pub n_cavs_available: u32,
    pub source: FrameSource,
    pub embedding: Array3<f32>,
    pub gt: GroundTruthMap,
}

/// Consecutive frames of one scenario and ego, each with its selected source.
#[derive(Clone, Debug)]
pub struct FrameSequence {
    pub scenario_id: u64,
    pub ego_id: u32,
    pub frames: Vec<SequenceFrame>,
}

impl EmbeddingRecord {
    pub fn embedding(&self, source: FrameSource) -> &Array3<f32> {
        match source {
            FrameSource::Fused => &self.fused,
            FrameSource::EgoOnly => &self.ego_only,
        }
    }

    pub fn frame(&self, source: FrameSource) -> SequenceFrame {
        SequenceFrame {
            frame_index: self.frame_index,
            n_cavs_available: self.n_cavs_available,
            source,
            embedding: self.embedding(source).clone(),
            gt: self.gt.clone(),
        }
    }

    fn encode(&self, geom: &Geometry, out: &mut Vec<u8>) -> Result<()> {
        let dim = (geom.channels, geom.height, geom.width);
        if self.fused.dim() != dim || self.ego_only.dim() != dim {
            return Err(Error::Data(format!(
                "record ({}, {}) embedding shape differs from store geometry {dim:?}",
                self.scenario_id, self.frame_index
            )));
        }
        if self.gt.dim() != (geom.grid_cells, geom.grid_cells) {
            return Err(Error::Data(format!(
                "record ({}, {}) ground truth {:?} differs from grid {}",
                self.scenario_id,
                self.frame_index,
                self.gt.dim(),
                geom.grid_cells
            )));
        }
        out.extend_from_slice(&self.scenario_id.to_le_bytes());
        out.extend_from_slice(&self.frame_index.to_le_bytes());
        out.extend_from_slice(&self.ego_id.to_le_bytes());
        out.extend_from_slice(&self.n_cavs_available.to_le_bytes());
        put_f32s(&self.fused, out);
        put_f32s(&self.ego_only, out);
        pack_bits(&self.gt.0, out);
        Ok(())
    }

    fn decode(b: &[u8], geom: &Geometry) -> Self {
        let dim = (geom.channels, geom.height, geom.width);
        let n = 4 * geom.embedding_len();
        let e0 = 24;
        Self {
            scenario_id: u64_at(b, 0),
            frame_index: u64_at(b, 8) as i64,
            ego_id: u32_at(b, 16),
            n_cavs_available: u32_at(b, 20),
            fused: get_f32s(&b[e0..e0 + n], dim),
            ego_only: get_f32s(&b[e0 + n..e0 + 2 * n], dim),
            gt: GroundTruthMap(unpack_bits(&b[e0 + 2 * n..], geom.grid_cells)),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ScenarioEntry {
    pub scenario_id: u64,
    pub ego_id: u32,
    pub n_frames: u32,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StoreManifest {
    pub geometry: Geometry,
    pub record_count: u64,
    pub base_digest: String,
    pub scenarios: Vec<ScenarioEntry>,
}

impl StoreManifest {
    fn encode(&self) -> Vec<u8> {
        let g = &self.geometry;
        let mut b = Vec::new();
        b.extend_from_slice(STORE_MAGIC);
        b.extend_from_slice(&STORE_VERSION.to_le_bytes());
        for v in [g.channels, g.height, g.width, g.grid_cells] {
            b.extend_from_slice(&(v as u32).to_le_bytes());
        }
        b.extend_from_slice(&self.record_count.to_le_bytes());
        let mut d = self.base_digest.as_bytes().to_vec();
        d.resize(64, b'0');
        b.extend_from_slice(&d);
        b.extend_from_slice(&(self.scenarios.len() as u32).to_le_bytes());
        for s in &self.scenarios {
            b.extend_from_slice(&s.scenario_id.to_le_bytes());
            b.extend_from_slice(&s.ego_id.to_le_bytes());
            b.extend_from_slice(&s.n_frames.to_le_bytes());
        }
        b
    }

    fn decode(b: &[u8]) -> Result<Self> {
        check_header(b, "store manifest")?;
        let fixed = 8 + 16 + 8 + 64 + 4;
        if b.len() < fixed {
            return Err(Error::Data("store manifest truncated".into()));
        }
        let geometry = Geometry {
            channels: u32_at(b, 8) as usize,
            height: u32_at(b, 12) as usize,
            width: u32_at(b, 16) as usize,
            grid_cells: u32_at(b, 20) as usize,
        };
        let record_count = u64_at(b, 24);
        let base_digest = String::from_utf8_lossy(&b[32..96]).into_owned();
        let n = u32_at(b, 96) as usize;
        if b.len() != fixed + 16 * n {
            return Err(Error::Data(format!(
                "store manifest is {} bytes, expected {} for {n} scenarios",
                b.len(),
                fixed + 16 * n
            )));
        }
        let scenarios = (0..n)
            .map(|i| {
                let at = fixed + 16 * i;
                ScenarioEntry {
                    scenario_id: u64_at(b, at),
                    ego_id: u32_at(b, at + 8),
                    n_frames: u32_at(b, at + 12),
                }
            })
            .collect();
        Ok(Self {
            geometry,
            record_count,
            base_digest,
            scenarios,
        })
    }
}

/// Writes a complete store into a staging directory and promotes it on
/// [`StoreWriter::finish`]; an abandoned writer leaves no store behind.
pub struct StoreWriter {
    dst: PathBuf,
    staged: PathBuf,
    geometry: Geometry,
    base_digest: String,
    scenarios: Vec<ScenarioEntry>,
}

impl StoreWriter {
    pub fn create(dst: &Path, geometry: Geometry, base_digest: &str) -> Result<Self> {
        Ok(Self {
            dst: dst.to_path_buf(),
            staged: staging_dir(dst)?,
            geometry,
            base_digest: base_digest.to_string(),
            scenarios: Vec::new(),
        })
    }

    /// Appends one scenario; records must share a scenario and ego and have
    /// consecutive frame indices starting at zero.
    pub fn write_scenario(&mut self, records: &[EmbeddingRecord]) -> Result<()> {
        let first = records
            .first()
            .ok_or_else(|| Error::Data("scenario without records".into()))?;
        if self.scenarios.iter().any(|s| s.scenario_id == first.scenario_id) {
            return Err(Error::Data(format!("scenario {} written twice", first.scenario_id)));
        }
        for (i, r) in records.iter().enumerate() {
            if r.scenario_id != first.scenario_id || r.ego_id != first.ego_id || r.frame_index != i as i64 {
                return Err(Error::Data(format!(
                    "record {i} of scenario {} is out of order or mixes identities",
                    first.scenario_id
                )));
            }
        }
        let stride = self.geometry.stride();
        let mut buf = Vec::with_capacity(RECORD_HEADER + stride * records.len());
        buf.extend_from_slice(STORE_MAGIC);
        buf.extend_from_slice(&STORE_VERSION.to_le_bytes());
        buf.extend_from_slice(&(stride as u32).to_le_bytes());
        buf.extend_from_slice(&(records.len() as u32).to_le_bytes());
        for r in records {
            r.encode(&self.geometry, &mut buf)?;
        }
        let path = self.staged.join(record_file_name(first.scenario_id));
        fs::write(&path, &buf).map_err(|e| Error::io(&path, e))?;
        self.scenarios.push(ScenarioEntry {
            scenario_id: first.scenario_id,
            ego_id: first.ego_id,
            n_frames: records.len() as u32,
        });
        Ok(())
    }

    pub fn finish(mut self) -> Result<StoreManifest> {
        self.scenarios.sort_by_key(|s| s.scenario_id);
        let manifest = StoreManifest {
            geometry: self.geometry,
            record_count: self.scenarios.iter().map(|s| s.n_frames as u64).sum(),
            base_digest: self.base_digest.clone(),
            scenarios: self.scenarios.clone(),
        };
        let path = self.staged.join(MANIFEST_FILE);
        fs::write(&path, manifest.encode()).map_err(|e| Error::io(&path, e))?;
        promote_dir(&self.staged, &self.dst)?;
        Ok(manifest)
    }
}

/// Read access to a finalized store. Reads seek straight to the record.
#[derive(Clone, Debug)]
pub struct EmbeddingStore {
    root: PathBuf,
    manifest: StoreManifest,
    preloaded: Option<Vec<Vec<EmbeddingRecord>>>,
}

impl EmbeddingStore {
    pub fn open(root: &Path) -> Result<Self> {
        let mpath = root.join(MANIFEST_FILE);
        if !mpath.exists() {
            return Err(Error::MissingDependency {
                what: "embedding store".into(),
                path: root.to_path_buf(),
                step: "cache",
            });
        }
        let bytes = fs::read(&mpath).map_err(|e| Error::io(&mpath, e))?;
        Ok(Self {
            root: root.to_path_buf(),
            manifest: StoreManifest::decode(&bytes)?,
            preloaded: None,
        })
    }

    /// Reads every record into memory; later reads are served from there.
    pub fn preload(mut self) -> Result<Self> {
        let all = self
            .manifest
            .scenarios
            .iter()
            .map(|s| self.read_scenario(s.scenario_id))
            .collect::<Result<Vec<_>>>()?;
        self.preloaded = Some(all);
        Ok(self)
    }

    pub fn manifest(&self) -> &StoreManifest {
        &self.manifest
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn geometry(&self) -> Geometry {
        self.manifest.geometry
    }

    pub fn scenario_ids(&self) -> Vec<u64> {
        self.manifest.scenarios.iter().map(|s| s.scenario_id).collect()
    }

    fn entry(&self, scenario_id: u64) -> Result<(usize, &ScenarioEntry)> {
        self.manifest
            .scenarios
            .iter()
            .enumerate()
            .find(|(_, s)| s.scenario_id == scenario_id)
            .ok_or_else(|| Error::Lookup(format!("scenario {scenario_id} not in store")))
    }

    pub fn n_frames(&self, scenario_id: u64) -> Result<usize> {
        Ok(self.entry(scenario_id)?.1.n_frames as usize)
    }

    pub fn read_record(&self, scenario_id: u64, frame: usize) -> Result<EmbeddingRecord> {
        let (pos, entry) = self.entry(scenario_id)?;
        if frame >= entry.n_frames as usize {
            return Err(Error::Lookup(format!(
                "frame {frame} of scenario {scenario_id} not in store ({} frames)",
                entry.n_frames
            )));
        }
        if let Some(all) = &self.preloaded {
            return Ok(all[pos][frame].clone());
        }
        let geom = self.geometry();
        let stride = geom.stride();
        let path = self.root.join(record_file_name(scenario_id));
        let mut f = fs::File::open(&path).map_err(|e| Error::io(&path, e))?;
        let mut buf = vec![0u8; stride];
        f.seek(SeekFrom::Start((RECORD_HEADER + frame * stride) as u64))
            .and_then(|_| f.read_exact(&mut buf))
            .map_err(|e| Error::io(&path, e))?;
        Ok(EmbeddingRecord::decode(&buf, &geom))
    }

    pub fn read_scenario(&self, scenario_id: u64) -> Result<Vec<EmbeddingRecord>> {
        let (pos, entry) = self.entry(scenario_id)?;
        if let Some(all) = &self.preloaded {
            return Ok(all[pos].clone());
        }
        let geom = self.geometry();
        let path = self.root.join(record_file_name(scenario_id));
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        check_header(&bytes, &path.display().to_string())?;
        let stride = geom.stride();
        let expected = RECORD_HEADER + stride * entry.n_frames as usize;
        if bytes.len() != expected {
            return Err(Error::Data(format!(
                "{} is {} bytes, expected {expected}",
                path.display(),
                bytes.len()
            )));
        }
        Ok(bytes[RECORD_HEADER..]
            .chunks_exact(stride)
            .map(|c| EmbeddingRecord::decode(c, &geom))
            .collect())
    }

    /// Frames `start..start + mask.len()` with the source chosen per frame.
    pub fn read_sequence(&self, scenario_id: u64, start: usize, mask: &[FrameSource]) -> Result<FrameSequence> {
        let (_, entry) = self.entry(scenario_id)?;
        if start + mask.len() > entry.n_frames as usize {
            return Err(Error::Lookup(format!(
                "frames {start}..{} of scenario {scenario_id} not in store ({} frames)",
                start + mask.len(),
                entry.n_frames
            )));
        }
        let frames = mask
            .iter()
            .enumerate()
            .map(|(k, &src)| Ok(self.read_record(scenario_id, start + k)?.frame(src)))
            .collect::<Result<Vec<_>>>()?;
        Ok(FrameSequence {
            scenario_id,
            ego_id: entry.ego_id,
            frames,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct VerifyReport {
    pub scenarios: usize,
    pub records: u64,
    pub single_cav_frames: u64,
    pub bytes: u64,
}

/// Checks manifest, strides, byte lengths, record identities, finiteness and
/// the single-CAV invariant.
pub fn verify_store(root: &Path) -> Result<VerifyReport> {
    let store = EmbeddingStore::open(root)?;
    let m = store.manifest();
    let geom = m.geometry;
    if geom.channels == 0 || geom.height == 0 || geom.width == 0 || geom.grid_cells == 0 {
        return Err(Error::Data(format!("degenerate store geometry {geom:?}")));
    }
    let mut report = VerifyReport {
        scenarios: m.scenarios.len(),
        records: 0,
        single_cav_frames: 0,
        bytes: 0,
    };
    for w in m.scenarios.windows(2) {
        if w[0].scenario_id >= w[1].scenario_id {
            return Err(Error::Data("manifest scenarios are not strictly ordered".into()));
        }
    }
    for s in &m.scenarios {
        let path = root.join(record_file_name(s.scenario_id));
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        check_header(&bytes, &path.display().to_string())?;
        let stride = u32_at(&bytes, 8) as usize;
        let count = u32_at(&bytes, 12);
        if stride != geom.stride() {
            return Err(Error::Data(format!(
                "{}: stride {stride} but geometry implies {}",
                path.display(),
                geom.stride()
            )));
        }
        if count != s.n_frames {
            return Err(Error::Data(format!(
                "{}: {count} records, manifest says {}",
                path.display(),
                s.n_frames
            )));
        }
        if bytes.len() != RECORD_HEADER + stride * count as usize {
            return Err(Error::Data(format!(
                "{}: {} bytes, expected {}",
                path.display(),
                bytes.len(),
                RECORD_HEADER + stride * count as usize
            )));
        }
        for (k, chunk) in bytes[RECORD_HEADER..].chunks_exact(stride).enumerate() {
            let r = EmbeddingRecord::decode(chunk, &geom);
            if r.scenario_id != s.scenario_id || r.frame_index != k as i64 || r.ego_id != s.ego_id {
                return Err(Error::Data(format!(
                    "{}: record {k} carries identity ({}, {}, {})",
                    path.display(),
                    r.scenario_id,
                    r.frame_index,
                    r.ego_id
                )));
            }
            if !r.fused.iter().chain(r.ego_only.iter()).all(|v| v.is_finite()) {
                return Err(Error::Data(format!("{}: record {k} has non-finite values", path.display())));
            }
            if r.n_cavs_available == 0 {
                return Err(Error::Data(format!("{}: record {k} lists no agents", path.display())));
            }
            if r.n_cavs_available == 1 {
                let same = Zip::from(&r.fused)
                    .and(&r.ego_only)
                    .all(|a, b| a.to_bits() == b.to_bits());
                if !same {
                    return Err(Error::Data(format!(
                        "{}: record {k} has one agent but fused != ego_only",
                        path.display()
                    )));
                }
                report.single_cav_frames += 1;
            }
            report.records += 1;
        }
        report.bytes += bytes.len() as u64;
    }
    if report.records != m.record_count {
        return Err(Error::Data(format!(
            "manifest record_count {} but files hold {}",
            m.record_count, report.records
        )));
    }
    Ok(report)
}

/// Records for every frame of `scn`: fused over the range-gated schedule and
/// ego-only, both from `base`.
pub fn encode_scenario_records(
    scn: &Scenario,
    scenario_id: u64,
    world: &WorldConfig,
    base: &BaseModel<f32>,
) -> Result<Vec<EmbeddingRecord>> {
    let sched = comm_schedule(scn, world, &[])?;
    (0..scn.n_frames())
        .map(|frame| {
            let agents = &sched.available[frame];
            let mut embs = Vec::with_capacity(agents.len());
            let mut ego = None;
            for &a in agents {
                let e = base.encode(&agent_observation(scn, world, frame, a)?, frame as i64)?;
                if a == scn.ego_id {
                    ego = Some(e.clone());
                }
                embs.push(e);
            }
            let ego = ego.ok_or_else(|| Error::Data(format!("ego missing from schedule at frame {frame}")))?;
            let fused = fuse_agents(&embs, base.config.fusion)?;
            Ok(EmbeddingRecord {
                scenario_id,
                frame_index: frame as i64,
                ego_id: scn.ego_id,
                n_cavs_available: agents.len() as u32,
                fused: fused.data,
                ego_only: ego.data,
                gt: GroundTruthMap(ground_truth_map(scn, world, frame)?),
            })
        })
        .collect()
}

/// Encodes `scenarios` (paired with their ids) into a new store at `dst`.
pub fn cache_embeddings(
    dst: &Path,
    scenarios: &[(u64, Scenario)],
    world: &WorldConfig,
    base: &BaseModel<f32>,
) -> Result<StoreManifest> {
    let side = base.config.embedding_size(world.grid_cells);
    let geometry = Geometry {
        channels: base.config.channels,
        height: side,
        width: side,
        grid_cells: world.grid_cells,
    };
    let mut writer = StoreWriter::create(dst, geometry, &digest(base))?;
    for (id, scn) in scenarios {
        writer.write_scenario(&encode_scenario_records(scn, *id, world, base)?)?;
    }
    writer.finish()
}
