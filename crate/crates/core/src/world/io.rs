//! Scenario files.
//!
//! Layout, all little-endian:
//!
//! ```text
//! magic    [u8; 4]  "TBW1"
//! version  u32      1
//! seed     u64
//! n_veh    u32
//! n_frames u32
//! n_cavs   u32
//! ego_id   u32
//! dt       f32
//! cav_ids  [u32; n_cavs]
//! per vehicle:
//!   id u32, length f32, width f32,
//!   n_frames x (x f32, y f32, heading f32)
//! ```

use std::fs;
use std::path::Path;

use super::{Pose, Scenario, VehicleTrack};
use crate::error::{Error, Result};

pub const SCENARIO_MAGIC: &[u8; 4] = b"TBW1";
const VERSION: u32 = 1;

pub fn encode_scenario(scn: &Scenario) -> Vec<u8> {
    let n_frames = scn.n_frames();
    let mut b = Vec::with_capacity(40 + scn.vehicles.len() * (12 + n_frames * 12));
    b.extend_from_slice(SCENARIO_MAGIC);
    b.extend_from_slice(&VERSION.to_le_bytes());
    b.extend_from_slice(&scn.seed.to_le_bytes());
    for v in [
        scn.vehicles.len() as u32,
        n_frames as u32,
        scn.cav_ids.len() as u32,
        scn.ego_id,
    ] {
        b.extend_from_slice(&v.to_le_bytes());
    }
    b.extend_from_slice(&scn.dt.to_le_bytes());
    for id in &scn.cav_ids {
        b.extend_from_slice(&id.to_le_bytes());
    }
    for v in &scn.vehicles {
        b.extend_from_slice(&v.id.to_le_bytes());
        b.extend_from_slice(&v.length.to_le_bytes());
        b.extend_from_slice(&v.width.to_le_bytes());
        for p in &v.poses {
            for f in [p.x, p.y, p.heading] {
                b.extend_from_slice(&f.to_le_bytes());
            }
        }
    }
    b
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take<const N: usize>(&mut self) -> Result<[u8; N]> {
        let end = self.pos + N;
        let s = self
            .buf
            .get(self.pos..end)
            .ok_or_else(|| Error::Data(format!("scenario file truncated at byte {}", self.pos)))?;
        self.pos = end;
        Ok(s.try_into().expect("slice length"))
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take()?))
    }
    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take()?))
    }
}

pub fn decode_scenario(buf: &[u8]) -> Result<Scenario> {
    let mut r = Reader { buf, pos: 0 };
    if &r.take::<4>()? != SCENARIO_MAGIC {
        return Err(Error::Data("not a scenario file (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Data(format!("unsupported scenario version {version}")));
    }
    let seed = u64::from_le_bytes(r.take()?);
    let n_veh = r.u32()? as usize;
    let n_frames = r.u32()? as usize;
    let n_cavs = r.u32()? as usize;
    let ego_id = r.u32()?;
    let dt = r.f32()?;
    let cav_ids = (0..n_cavs).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
    let mut vehicles = Vec::with_capacity(n_veh);
    for _ in 0..n_veh {
        let id = r.u32()?;
        let length = r.f32()?;
        let width = r.f32()?;
        let poses = (0..n_frames)
            .map(|_| {
                Ok(Pose {
                    x: r.f32()?,
                    y: r.f32()?,
                    heading: r.f32()?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        vehicles.push(VehicleTrack { id, length, width, poses });
    }
    if r.pos != buf.len() {
        return Err(Error::Data(format!(
            "{} trailing bytes in scenario file",
            buf.len() - r.pos
        )));
    }
    let scn = Scenario { seed, dt, vehicles, cav_ids, ego_id };
    if !scn.is_cav(ego_id) {
        return Err(Error::Data(format!("ego {ego_id} is not among the CAVs")));
    }
    Ok(scn)
}

pub fn write_scenario(path: &Path, scn: &Scenario) -> Result<()> {
    fs::write(path, encode_scenario(scn)).map_err(|e| Error::io(path, e))
}

pub fn read_scenario(path: &Path) -> Result<Scenario> {
    let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_scenario(&buf)
}
