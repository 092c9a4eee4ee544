//! Grid filters shared across modules: separable Gaussian smoothing, exact
//! Euclidean distance transform, ball dilation and connected-component
//! labeling.

use rayon::prelude::*;

/// Normalised 1D Gaussian kernel truncated at 3σ.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return vec![1.0];
    }
    let radius = (3.0 * sigma).ceil().max(1.0) as isize;
    let mut k: Vec<f64> = (-radius..=radius)
        .map(|x| (-(x * x) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= sum);
    k
}

fn convolve_axis(data: &[f64], dims: [usize; 3], axis: usize, kernel: &[f64]) -> Vec<f64> {
    if kernel.len() == 1 {
        return data.to_vec();
    }
    let radius = (kernel.len() / 2) as isize;
    let n = dims[axis] as isize;
    let stride = match axis {
        0 => 1,
        1 => dims[0],
        _ => dims[0] * dims[1],
    };
    (0..data.len())
        .into_par_iter()
        .map(|lin| {
            let pos = ((lin / stride) % dims[axis]) as isize;
            let base = lin as isize - pos * stride as isize;
            let mut acc = 0.0;
            for (t, w) in kernel.iter().enumerate() {
                // replicate the edge sample beyond the border
                let p = (pos + t as isize - radius).clamp(0, n - 1);
                acc += w * data[(base + p * stride as isize) as usize];
            }
            acc
        })
        .collect()
}

/// Separable Gaussian smoothing with per-axis σ in voxels (edge replicated).
pub fn gaussian_smooth(data: &[f64], dims: [usize; 3], sigma_vox: [f64; 3]) -> Vec<f64> {
    let mut out = data.to_vec();
    for (axis, &sigma) in sigma_vox.iter().enumerate() {
        out = convolve_axis(&out, dims, axis, &gaussian_kernel(sigma));
    }
    out
}

/// 1D squared distance transform of sampled function `f` on a grid of
/// step `h` (lower envelope of parabolas). Infinite entries are ignored.
fn edt_1d(f: &[f64], h: f64, out: &mut [f64], v: &mut [usize], z: &mut [f64]) {
    let n = f.len();
    let mut k: isize = -1;
    for q in 0..n {
        if !f[q].is_finite() {
            continue;
        }
        let fq = f[q] + (q as f64 * h).powi(2);
        loop {
            if k < 0 {
                k = 0;
                v[0] = q;
                z[0] = f64::NEG_INFINITY;
                break;
            }
            let p = v[k as usize];
            let fp = f[p] + (p as f64 * h).powi(2);
            let s = (fq - fp) / (2.0 * h * (q as f64 - p as f64) * h);
            if s <= z[k as usize] {
                k -= 1;
            } else {
                k += 1;
                v[k as usize] = q;
                z[k as usize] = s;
                break;
            }
        }
    }
    if k < 0 {
        out.iter_mut().for_each(|o| *o = f64::INFINITY);
        return;
    }
    let mut j = 0usize;
    for (q, o) in out.iter_mut().enumerate() {
        let x = q as f64;
        while (j as isize) < k && z[j + 1] < x {
            j += 1;
        }
        let p = v[j];
        *o = ((x - p as f64) * h).powi(2) + f[p];
    }
}

/// Exact squared Euclidean distance (mm²) from each voxel centre to the
/// nearest `seed` voxel centre; infinity when there are no seeds.
pub fn squared_distance_to(seed: &[bool], dims: [usize; 3], spacing: [f64; 3]) -> Vec<f64> {
    let mut d: Vec<f64> = seed
        .iter()
        .map(|&s| if s { 0.0 } else { f64::INFINITY })
        .collect();
    for axis in 0..3 {
        let n = dims[axis];
        let stride = match axis {
            0 => 1,
            1 => dims[0],
            _ => dims[0] * dims[1],
        };
        let lines: Vec<usize> = (0..d.len())
            .filter(|&lin| (lin / stride) % n == 0)
            .collect();
        let results: Vec<(usize, Vec<f64>)> = lines
            .par_iter()
            .map(|&base| {
                let f: Vec<f64> = (0..n).map(|p| d[base + p * stride]).collect();
                let mut out = vec![0.0; n];
                let mut v = vec![0usize; n];
                let mut z = vec![0.0; n + 1];
                edt_1d(&f, spacing[axis], &mut out, &mut v, &mut z);
                (base, out)
            })
            .collect();
        for (base, out) in results {
            for (p, val) in out.into_iter().enumerate() {
                d[base + p * stride] = val;
            }
        }
    }
    d
}

/// Integer offsets of a Euclidean ball of radius `r` voxels (|o|² ≤ r²).
pub fn ball_offsets(radius: usize) -> Vec<[isize; 3]> {
    let r = radius as isize;
    let mut out = Vec::new();
    for z in -r..=r {
        for y in -r..=r {
            for x in -r..=r {
                if x * x + y * y + z * z <= r * r {
                    out.push([x, y, z]);
                }
            }
        }
    }
    out
}

/// Binary dilation with a Euclidean ball of `radius` voxels.
pub fn dilate_ball(mask: &[bool], dims: [usize; 3], radius: usize) -> Vec<bool> {
    if radius == 0 {
        return mask.to_vec();
    }
    let offsets = ball_offsets(radius);
    let [nx, ny, nz] = dims.map(|d| d as isize);
    (0..mask.len())
        .into_par_iter()
        .map(|lin| {
            let i = (lin % dims[0]) as isize;
            let j = ((lin / dims[0]) % dims[1]) as isize;
            let k = (lin / (dims[0] * dims[1])) as isize;
            offsets.iter().any(|o| {
                let (x, y, z) = (i + o[0], j + o[1], k + o[2]);
                x >= 0
                    && y >= 0
                    && z >= 0
                    && x < nx
                    && y < ny
                    && z < nz
                    && mask[(x + nx * (y + ny * z)) as usize]
            })
        })
        .collect()
}

/// Voxel neighbourhood; serialized as its neighbour count (6, 18 or 26).
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(try_from = "u32", into = "u32")]
pub enum Connectivity {
    /// Face neighbours.
    Six,
    /// Face and edge neighbours.
    Eighteen,
    /// Face, edge and corner neighbours.
    TwentySix,
}

impl Connectivity {
    pub fn from_count(n: u32) -> Option<Self> {
        match n {
            6 => Some(Connectivity::Six),
            18 => Some(Connectivity::Eighteen),
            26 => Some(Connectivity::TwentySix),
            _ => None,
        }
    }

    pub fn count(self) -> u32 {
        match self {
            Connectivity::Six => 6,
            Connectivity::Eighteen => 18,
            Connectivity::TwentySix => 26,
        }
    }

    /// Neighbour offsets that precede the centre in raster order.
    fn backward_offsets(self) -> Vec<[isize; 3]> {
        let max_nonzero = match self {
            Connectivity::Six => 1,
            Connectivity::Eighteen => 2,
            Connectivity::TwentySix => 3,
        };
        let mut out = Vec::new();
        for z in -1..=0isize {
            for y in -1..=1isize {
                for x in -1..=1isize {
                    let before = z < 0 || (z == 0 && (y < 0 || (y == 0 && x < 0)));
                    let nonzero = (x != 0) as usize + (y != 0) as usize + (z != 0) as usize;
                    if before && nonzero <= max_nonzero {
                        out.push([x, y, z]);
                    }
                }
            }
        }
        out
    }
}

impl TryFrom<u32> for Connectivity {
    type Error = String;

    fn try_from(n: u32) -> std::result::Result<Self, String> {
        Connectivity::from_count(n).ok_or_else(|| format!("connectivity must be 6, 18 or 26, got {n}"))
    }
}

impl From<Connectivity> for u32 {
    fn from(c: Connectivity) -> u32 {
        c.count()
    }
}

fn find(parent: &mut [u32], mut x: u32) -> u32 {
    while parent[x as usize] != x {
        parent[x as usize] = parent[parent[x as usize] as usize];
        x = parent[x as usize];
    }
    x
}

/// Label connected foreground voxels with ids `1..=n`, numbered in order of
/// each component's first voxel in raster order. Returns (labels, n).
pub fn label_components(mask: &[bool], dims: [usize; 3], conn: Connectivity) -> (Vec<u32>, usize) {
    let offsets = conn.backward_offsets();
    let [nx, ny, _] = dims.map(|d| d as isize);
    let mut provisional = vec![0u32; mask.len()];
    let mut parent: Vec<u32> = vec![0];
    for lin in 0..mask.len() {
        if !mask[lin] {
            continue;
        }
        let i = (lin % dims[0]) as isize;
        let j = ((lin / dims[0]) % dims[1]) as isize;
        let k = (lin / (dims[0] * dims[1])) as isize;
        let mut current = 0u32;
        for o in &offsets {
            let (x, y, z) = (i + o[0], j + o[1], k + o[2]);
            if x < 0 || y < 0 || z < 0 || x >= nx || y >= ny {
                continue;
            }
            let nb = provisional[(x + nx * (y + ny * z)) as usize];
            if nb == 0 {
                continue;
            }
            if current == 0 {
                current = find(&mut parent, nb);
            } else {
                let (a, b) = (find(&mut parent, current), find(&mut parent, nb));
                if a != b {
                    let (lo, hi) = if a < b { (a, b) } else { (b, a) };
                    parent[hi as usize] = lo;
                    current = lo;
                }
            }
        }
        if current == 0 {
            current = parent.len() as u32;
            parent.push(current);
        }
        provisional[lin] = current;
    }
    // provisional ids are created in raster order and unions keep the smaller
    // root, so dense relabeling by root order follows first-voxel order
    let mut dense = vec![0u32; parent.len()];
    let mut next = 0u32;
    let mut out = vec![0u32; mask.len()];
    for lin in 0..mask.len() {
        let p = provisional[lin];
        if p == 0 {
            continue;
        }
        let root = find(&mut parent, p) as usize;
        if dense[root] == 0 {
            next += 1;
            dense[root] = next;
        }
        out[lin] = dense[root];
    }
    (out, next as usize)
}
