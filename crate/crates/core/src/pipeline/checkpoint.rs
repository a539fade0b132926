//! Level-boundary checkpoints stored as raw `f64`, so a resumed run
//! continues from exactly the state it stopped at.

use std::fs;
use std::path::Path;

use crate::diffplane::DifferencePlane;
use crate::error::{Error, Result};
use crate::geometry::Aabb;
use crate::volume::VoxelGrid;

use super::EpochLog;

const MAGIC: &[u8; 4] = b"VRCK";
const VERSION: u32 = 1;
const STATE_FILE: &str = "state.bin";
const LOG_FILE: &str = "log.jsonl";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    /// Index of the last completed level.
    pub level: usize,
    pub grid: VoxelGrid,
    pub planes: Vec<DifferencePlane>,
    pub logs: Vec<EpochLog>,
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take<const N: usize>(&mut self) -> Result<[u8; N]> {
        let end = self.pos + N;
        let chunk = self
            .bytes
            .get(self.pos..end)
            .ok_or_else(|| Error::Format("checkpoint truncated".into()))?;
        self.pos = end;
        Ok(chunk.try_into().unwrap())
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take()?))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take()?))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        (0..n).map(|_| self.f64()).collect()
    }
}

impl Checkpoint {
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut b = Vec::new();
        b.extend_from_slice(MAGIC);
        b.extend_from_slice(&VERSION.to_le_bytes());
        let u = |v: u64, b: &mut Vec<u8>| b.extend_from_slice(&v.to_le_bytes());
        u(self.level as u64, &mut b);
        for n in self.grid.resolution() {
            u(n as u64, &mut b);
        }
        let bbox = self.grid.bbox();
        for v in bbox.min.iter().chain(&bbox.max) {
            b.extend_from_slice(&v.to_le_bytes());
        }
        for v in self.grid.density.iter().chain(self.grid.color.as_flattened()) {
            b.extend_from_slice(&v.to_le_bytes());
        }
        u(self.planes.len() as u64, &mut b);
        for p in &self.planes {
            u(p.width as u64, &mut b);
            u(p.height as u64, &mut b);
            b.extend_from_slice(&p.sigma_s.to_le_bytes());
            for v in &p.alpha {
                b.extend_from_slice(&v.to_le_bytes());
            }
        }
        // write then rename so an interrupted save never leaves a torn file
        let tmp = dir.join(format!("{STATE_FILE}.tmp"));
        fs::write(&tmp, &b).map_err(|e| Error::io(&tmp, e))?;
        let dst = dir.join(STATE_FILE);
        fs::rename(&tmp, &dst).map_err(|e| Error::io(&dst, e))?;
        super::write_log(&dir.join(LOG_FILE), &self.logs)
    }

    /// `None` when the directory holds no checkpoint.
    pub fn load(dir: &Path) -> Result<Option<Self>> {
        let path = dir.join(STATE_FILE);
        if !path.exists() {
            return Ok(None);
        }
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let mut r = Reader { bytes: &bytes, pos: 0 };
        if &r.take::<4>()? != MAGIC {
            return Err(Error::Format(format!("{} is not a checkpoint", path.display())));
        }
        let version = u32::from_le_bytes(r.take()?);
        if version != VERSION {
            return Err(Error::Format(format!("checkpoint version {version}, expected {VERSION}")));
        }
        let level = r.u64()? as usize;
        let res = [r.u64()? as usize, r.u64()? as usize, r.u64()? as usize];
        let min = [r.f64()?, r.f64()?, r.f64()?];
        let max = [r.f64()?, r.f64()?, r.f64()?];
        let mut grid = VoxelGrid::new(res, Aabb { min, max }, 0.0, [0.0; 3])?;
        let n = grid.voxel_count();
        grid.density = r.f64s(n)?;
        let colors = r.f64s(3 * n)?;
        grid.color = colors.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect();
        let count = r.u64()? as usize;
        let mut planes = Vec::with_capacity(count);
        for _ in 0..count {
            let (w, h) = (r.u64()? as usize, r.u64()? as usize);
            let mut p = DifferencePlane::new(w, h, r.f64()?);
            p.alpha = r.f64s(w * h)?;
            planes.push(p);
        }
        if r.pos != bytes.len() {
            return Err(Error::Format("trailing bytes in checkpoint".into()));
        }
        let log_path = dir.join(LOG_FILE);
        let text = fs::read_to_string(&log_path).map_err(|e| Error::io(&log_path, e))?;
        let logs = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(serde_json::from_str)
            .collect::<std::result::Result<Vec<EpochLog>, _>>()?;
        Ok(Some(Self {
            level,
            grid,
            planes,
            logs,
        }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    #[test]
    fn round_trip_is_exact() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let mut grid = VoxelGrid::new([3, 4, 5], Aabb::centered_cube(1.5), 0.0, [0.0; 3]).unwrap();
        for i in 0..grid.voxel_count() {
            grid.density[i] = rng.random::<f64>() * 7.0;
            grid.color[i] = [rng.random(), rng.random(), rng.random()];
        }
        let mut p = DifferencePlane::new(4, 3, 0.002);
        p.alpha.iter_mut().for_each(|a| *a = rng.random::<f64>() * 100.0);
        let cp = Checkpoint {
            level: 1,
            grid,
            planes: vec![p.clone(), p],
            logs: vec![EpochLog {
                level: 0,
                epoch: 0,
                photometric: 0.1 + 0.2,
                cauchy: 1.0 / 3.0,
                sparsity: 0.0,
                psnr_heldout: Some(31.25),
                lr_scale: 1.0,
                elapsed_s: 0.5,
            }],
        };
        let dir = tempfile::tempdir().unwrap();
        assert!(Checkpoint::load(dir.path()).unwrap().is_none());
        cp.save(dir.path()).unwrap();
        assert_eq!(Checkpoint::load(dir.path()).unwrap().unwrap(), cp);
        fs::write(dir.path().join(STATE_FILE), b"nope").unwrap();
        assert!(Checkpoint::load(dir.path()).is_err());
    }
}
