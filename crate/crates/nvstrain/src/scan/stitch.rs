use super::ScanError;
use crate::analysis::{GridGeometry, StrainMap};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, HashMap, VecDeque};

const MIN_OVERLAP: f64 = 0.10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StitchResult {
    pub map: StrainMap,
    /// Mz offset removed from each FOV, Hz (FOV 0 is the reference).
    pub offsets: Vec<f64>,
    /// RMS Mz mismatch across overlaps after correction, Hz.
    pub seam_rms: f64,
}

type Key = [i64; 3];

/// Quarter-cell lattice key; FOVs must share spacing and a common lattice.
fn key(geo: &GridGeometry, spacing: [f64; 3], i: usize) -> Key {
    let p = geo.position(i);
    [0, 1, 2].map(|k| (4.0 * p[k] / spacing[k]).round() as i64)
}

fn index(m: &StrainMap, spacing: [f64; 3]) -> HashMap<Key, usize> {
    (0..m.len()).map(|i| (key(&m.geometry, spacing, i), i)).collect()
}

/// Removes per-FOV Mz offsets by least squares over the listed overlaps
/// (offset of FOV 0 fixed at zero) and merges the FOVs onto one grid with
/// inverse-variance weights.
pub fn stitch(fovs: &[StrainMap], overlaps: &[(usize, usize)]) -> Result<StitchResult, ScanError> {
    let n = fovs.len();
    if n == 0 {
        return Err(ScanError::Config("nothing to stitch".into()));
    }
    let spacing = fovs[0].geometry.spacing;
    for m in fovs {
        m.validate()?;
        if m.geometry.spacing.iter().zip(&spacing).any(|(a, b)| (a - b).abs() > 1e-9 * b.abs()) {
            return Err(ScanError::Config("FOVs must share one pixel spacing".into()));
        }
    }
    let idx: Vec<HashMap<Key, usize>> = fovs.iter().map(|m| index(m, spacing)).collect();
    // (i, j, cell in i, cell in j) for every jointly measured overlap cell
    let mut rows: Vec<(usize, usize, Vec<(usize, usize)>)> = Vec::new();
    let mut adj = vec![Vec::new(); n];
    for &(i, j) in overlaps {
        if i >= n || j >= n || i == j {
            return Err(ScanError::Config(format!("bad overlap pair ({i}, {j})")));
        }
        let shared: Vec<(usize, usize)> = idx[i].iter().filter_map(|(k, &a)| idx[j].get(k).map(|&b| (a, b))).collect();
        let frac = shared.len() as f64 / fovs[i].len().min(fovs[j].len()) as f64;
        if frac < MIN_OVERLAP {
            return Err(ScanError::InsufficientOverlap(i, j, 100.0 * frac));
        }
        let mut both: Vec<(usize, usize)> =
            shared.into_iter().filter(|&(a, b)| !fovs[i].masked[a] && !fovs[j].masked[b]).collect();
        if both.is_empty() {
            return Err(ScanError::InsufficientOverlap(i, j, 0.0));
        }
        both.sort_unstable();
        adj[i].push(j);
        adj[j].push(i);
        rows.push((i, j, both));
    }
    let mut seen = vec![false; n];
    let mut queue = VecDeque::from([0usize]);
    seen[0] = true;
    while let Some(u) = queue.pop_front() {
        for &v in &adj[u] {
            if !seen[v] {
                seen[v] = true;
                queue.push_back(v);
            }
        }
    }
    if let Some(lost) = seen.iter().position(|s| !s) {
        return Err(ScanError::Disconnected(format!("FOV {lost} has no overlap path to FOV 0")));
    }

    let mut offsets = vec![0.0; n];
    if n > 1 {
        // unknowns o_1..o_{n-1}; each overlap row o_i − o_j = mean(mz_i − mz_j), weighted by cell count
        let mut a = DMatrix::<f64>::zeros(n - 1, n - 1);
        let mut b = DVector::<f64>::zeros(n - 1);
        for (i, j, cells) in &rows {
            let w = cells.len() as f64;
            let d = cells.iter().map(|&(p, q)| fovs[*i].mz[p] - fovs[*j].mz[q]).sum::<f64>() / w;
            let mut g = vec![0.0; n];
            g[*i] += 1.0;
            g[*j] -= 1.0;
            for r in 1..n {
                b[r - 1] += w * g[r] * d;
                for c in 1..n {
                    a[(r - 1, c - 1)] += w * g[r] * g[c];
                }
            }
        }
        let sol = a.cholesky().ok_or_else(|| ScanError::Disconnected("singular overlap system".into()))?.solve(&b);
        for r in 1..n {
            offsets[r] = sol[r - 1];
        }
    }

    let (mut sq, mut cnt) = (0.0, 0usize);
    for (i, j, cells) in &rows {
        for &(p, q) in cells {
            sq += ((fovs[*i].mz[p] - offsets[*i]) - (fovs[*j].mz[q] - offsets[*j])).powi(2);
            cnt += 1;
        }
    }
    let seam_rms = if cnt > 0 { (sq / cnt as f64).sqrt() } else { 0.0 };

    // union grid over all keys
    let keys: Vec<Key> = idx.iter().flat_map(|m| m.keys().copied()).collect();
    let lo = [0, 1, 2].map(|k| keys.iter().map(|q| q[k]).min().unwrap_or(0));
    let hi = [0, 1, 2].map(|k| keys.iter().map(|q| q[k]).max().unwrap_or(0));
    let dims = [0, 1, 2].map(|k| ((hi[k] - lo[k]) / 4) as usize + 1);
    let geo = GridGeometry { origin: [0, 1, 2].map(|k| lo[k] as f64 * spacing[k] / 4.0), spacing, dims };
    let mut acc: BTreeMap<usize, (f64, f64, f64, f64, usize)> = BTreeMap::new();
    for (f, m) in fovs.iter().enumerate() {
        for i in m.measured() {
            let kq = key(&m.geometry, spacing, i);
            let c = [0, 1, 2].map(|k| ((kq[k] - lo[k]) / 4) as usize);
            let w = if m.sigma[i] > 0.0 { 1.0 / (m.sigma[i] * m.sigma[i]) } else { 1.0 };
            let e = acc.entry(geo.index(c[0], c[1], c[2])).or_insert((0.0, 0.0, 0.0, 0.0, 0));
            e.0 += w * (m.mz[i] - offsets[f]);
            e.1 += w;
            e.2 += m.amplitude[i];
            e.3 += if m.sigma[i] > 0.0 { 0.0 } else { 1.0 };
            e.4 += 1;
        }
    }
    let mut map = StrainMap::new(geo);
    for (cell, (wm, w, amp, unweighted, count)) in acc {
        let sigma = if unweighted > 0.0 { 0.0 } else { w.sqrt().recip() };
        map.set(cell, wm / w, sigma, amp / count as f64);
    }
    map.metadata = fovs[0].metadata.clone();
    map.metadata.virtual_time_s = fovs.iter().map(|m| m.metadata.virtual_time_s).sum();
    map.metadata.extra = serde_json::json!({
        "mode": "stitch",
        "fov_count": n,
        "offsets_hz": offsets,
        "seam_rms_hz": seam_rms,
    });
    Ok(StitchResult { map, offsets, seam_rms })
}
