//! Column-major storage of simulated path bundles with binary persistence
//! (raw little-endian doubles plus a JSON sidecar) and CSV export.

use super::state::MarketState;
use crate::error::{Error, Result};
use crate::stochastics::{InnovationVector, N_INNOVATIONS};
use crate::surface::SurfaceCoeffs;
use serde::{Deserialize, Serialize};
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};

/// A bundle of simulated paths. Each path holds `horizon + 1` states
/// (including the initial one); values for path `p` at step `t` live at flat
/// index `p * (horizon + 1) + t`.
#[derive(Debug, Clone, PartialEq)]
pub struct PathSet {
    pub n_paths: usize,
    pub horizon: usize,
    /// Step length in years.
    pub dt: f64,
    pub r: f64,
    pub q: f64,
    pub s: Vec<f64>,
    pub beta: Vec<[f64; 5]>,
    pub beta2_lag: Vec<f64>,
    pub h_r: Vec<f64>,
    pub h: Vec<[f64; 5]>,
    /// Innovation vectors used at each step, when retained. Entry at t=0 is
    /// the presampled vector driving the first variance update.
    pub innovations: Option<Vec<[f64; N_INNOVATIONS]>>,
    pub seed: u64,
    pub param_hash: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct PathSetMeta {
    version: u32,
    n_paths: usize,
    horizon: usize,
    dt: f64,
    r: f64,
    q: f64,
    seed: u64,
    param_hash: String,
    has_innovations: bool,
}

const PATHSET_VERSION: u32 = 1;

impl PathSet {
    pub fn with_capacity(
        n_paths: usize,
        horizon: usize,
        dt: f64,
        r: f64,
        q: f64,
        seed: u64,
        param_hash: String,
        keep_innovations: bool,
    ) -> Self {
        let cap = n_paths * (horizon + 1);
        PathSet {
            n_paths,
            horizon,
            dt,
            r,
            q,
            s: Vec::with_capacity(cap),
            beta: Vec::with_capacity(cap),
            beta2_lag: Vec::with_capacity(cap),
            h_r: Vec::with_capacity(cap),
            h: Vec::with_capacity(cap),
            innovations: keep_innovations.then(|| Vec::with_capacity(cap)),
            seed,
            param_hash,
        }
    }

    fn stride(&self) -> usize {
        self.horizon + 1
    }

    /// Appends a state; callers must push in (path, step) order.
    pub fn push_state(
        &mut self,
        path: usize,
        step: usize,
        state: &MarketState,
        eps: Option<&InnovationVector>,
    ) {
        debug_assert_eq!(self.s.len(), path * self.stride() + step);
        self.s.push(state.s);
        self.beta.push(state.beta.beta);
        self.beta2_lag.push(state.beta2_lag);
        self.h_r.push(state.h_r);
        self.h.push(state.h);
        if let Some(store) = self.innovations.as_mut() {
            store.push(eps.expect("innovations retained but none supplied").eps);
        }
    }

    /// Reassembles the state of one path at one step.
    pub fn state(&self, path: usize, step: usize) -> MarketState {
        let i = path * self.stride() + step;
        MarketState {
            s: self.s[i],
            beta: SurfaceCoeffs { beta: self.beta[i] },
            beta2_lag: self.beta2_lag[i],
            h_r: self.h_r[i],
            h: self.h[i],
        }
    }

    fn sidecar_path(path: &Path) -> PathBuf {
        let mut p = path.as_os_str().to_owned();
        p.push(".meta.json");
        PathBuf::from(p)
    }

    /// Writes the raw data blob to `path` and the metadata sidecar to
    /// `path + ".meta.json"`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = PathSetMeta {
            version: PATHSET_VERSION,
            n_paths: self.n_paths,
            horizon: self.horizon,
            dt: self.dt,
            r: self.r,
            q: self.q,
            seed: self.seed,
            param_hash: self.param_hash.clone(),
            has_innovations: self.innovations.is_some(),
        };
        std::fs::write(Self::sidecar_path(path), serde_json::to_string_pretty(&meta)?)?;
        let mut out = BufWriter::new(std::fs::File::create(path)?);
        let mut write_f64 = |v: f64| out.write_all(&v.to_le_bytes());
        for &v in &self.s {
            write_f64(v)?;
        }
        for b in &self.beta {
            for &v in b {
                write_f64(v)?;
            }
        }
        for &v in &self.beta2_lag {
            write_f64(v)?;
        }
        for &v in &self.h_r {
            write_f64(v)?;
        }
        for hv in &self.h {
            for &v in hv {
                write_f64(v)?;
            }
        }
        if let Some(inn) = &self.innovations {
            for e in inn {
                for &v in e {
                    write_f64(v)?;
                }
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<PathSet> {
        let meta_text = std::fs::read_to_string(Self::sidecar_path(path)).map_err(|e| {
            Error::config(format!("cannot read path-set sidecar for {}: {e}", path.display()))
        })?;
        let meta: PathSetMeta = serde_json::from_str(&meta_text)
            .map_err(|e| Error::format(format!("path-set sidecar: {e}")))?;
        if meta.version != PATHSET_VERSION {
            return Err(Error::format(format!(
                "unsupported path-set version {} (expected {PATHSET_VERSION})",
                meta.version
            )));
        }
        let n = meta.n_paths * (meta.horizon + 1);
        let expected_f64s = n * (1 + 5 + 1 + 1 + 5) + if meta.has_innovations { n * N_INNOVATIONS } else { 0 };
        let mut file = std::fs::File::open(path)
            .map_err(|e| Error::config(format!("cannot open path-set {}: {e}", path.display())))?;
        let mut bytes = Vec::new();
        file.read_to_end(&mut bytes)?;
        if bytes.len() != expected_f64s * 8 {
            return Err(Error::format(format!(
                "path-set {}: expected {} bytes, found {}",
                path.display(),
                expected_f64s * 8,
                bytes.len()
            )));
        }
        let mut cursor = 0usize;
        let mut take = |count: usize| -> Vec<f64> {
            let out: Vec<f64> = bytes[cursor..cursor + count * 8]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            cursor += count * 8;
            out
        };
        let s = take(n);
        let beta_flat = take(n * 5);
        let beta2_lag = take(n);
        let h_r = take(n);
        let h_flat = take(n * 5);
        let innovations = if meta.has_innovations {
            let flat = take(n * N_INNOVATIONS);
            Some(
                flat.chunks_exact(N_INNOVATIONS)
                    .map(|c| {
                        let mut a = [0.0; N_INNOVATIONS];
                        a.copy_from_slice(c);
                        a
                    })
                    .collect(),
            )
        } else {
            None
        };
        let pack5 = |flat: Vec<f64>| -> Vec<[f64; 5]> {
            flat.chunks_exact(5)
                .map(|c| {
                    let mut a = [0.0; 5];
                    a.copy_from_slice(c);
                    a
                })
                .collect()
        };
        Ok(PathSet {
            n_paths: meta.n_paths,
            horizon: meta.horizon,
            dt: meta.dt,
            r: meta.r,
            q: meta.q,
            s,
            beta: pack5(beta_flat),
            beta2_lag,
            h_r,
            h: pack5(h_flat),
            innovations,
            seed: meta.seed,
            param_hash: meta.param_hash,
        })
    }

    /// Exports all states as a flat CSV (one row per path-step).
    pub fn export_csv(&self, path: &Path) -> Result<()> {
        let mut out = BufWriter::new(std::fs::File::create(path)?);
        let mut header = String::from(
            "path,step,s,beta1,beta2,beta3,beta4,beta5,beta2_lag,h_R,h1,h2,h3,h4,h5",
        );
        if self.innovations.is_some() {
            header.push_str(",eps_R,eps_1,eps_2,eps_3,eps_4,eps_5");
        }
        writeln!(out, "{header}")?;
        for p in 0..self.n_paths {
            for t in 0..=self.horizon {
                let i = p * self.stride() + t;
                let mut line = format!("{p},{t},{:.17e}", self.s[i]);
                for &b in &self.beta[i] {
                    line.push_str(&format!(",{b:.17e}"));
                }
                line.push_str(&format!(",{:.17e},{:.17e}", self.beta2_lag[i], self.h_r[i]));
                for &hv in &self.h[i] {
                    line.push_str(&format!(",{hv:.17e}"));
                }
                if let Some(inn) = &self.innovations {
                    for &e in &inn[i] {
                        line.push_str(&format!(",{e:.17e}"));
                    }
                }
                writeln!(out, "{line}")?;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::jivr::params::JivrParams;
    use crate::jivr::simulate::{make_synthetic_pool, simulate};

    fn small_set() -> PathSet {
        let p = JivrParams::published();
        let pool = make_synthetic_pool(&p, 252, 4, 7).unwrap();
        simulate(&p, &pool, 5, 3, 42).unwrap()
    }

    #[test]
    fn save_load_roundtrip_is_exact() {
        let set = small_set();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("paths.bin");
        set.save(&path).unwrap();
        let loaded = PathSet::load(&path).unwrap();
        assert_eq!(set, loaded);
    }

    #[test]
    fn load_rejects_truncated_blob() {
        let set = small_set();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("paths.bin");
        set.save(&path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 8]).unwrap();
        assert!(PathSet::load(&path).is_err());
    }

    #[test]
    fn csv_export_row_count() {
        let set = small_set();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("paths.csv");
        set.export_csv(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 1 + set.n_paths * (set.horizon + 1));
        assert!(lines[0].starts_with("path,step,s,"));
        assert!(lines[0].ends_with("eps_5"));
    }

    #[test]
    fn state_accessor_matches_storage() {
        let set = small_set();
        let st = set.state(2, 3);
        let i = 2 * (set.horizon + 1) + 3;
        assert_eq!(st.s, set.s[i]);
        assert_eq!(st.h_r, set.h_r[i]);
        assert_eq!(st.beta.beta, set.beta[i]);
    }
}
