//! Exact convex hull of voxel centres and its voxelization. All geometry is
//! done on integer voxel indices, so inside/outside decisions are exact.

use std::collections::HashSet;

use rayon::prelude::*;

type P = [i64; 3];

fn sub(a: P, b: P) -> P {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn cross(a: P, b: P) -> P {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

fn dot(a: P, b: P) -> i64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

/// Positive when `p` lies on the side of plane (a, b, c) its normal points to.
fn orient(a: P, b: P, c: P, p: P) -> i64 {
    dot(cross(sub(b, a), sub(c, a)), sub(p, a))
}

fn cross2(o: [i64; 2], a: [i64; 2], b: [i64; 2]) -> i64 {
    (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])
}

/// Counter-clockwise hull without collinear vertices (monotone chain).
pub(crate) fn hull_2d(mut pts: Vec<[i64; 2]>) -> Vec<[i64; 2]> {
    pts.sort_unstable();
    pts.dedup();
    if pts.len() < 3 {
        return pts;
    }
    let mut out: Vec<[i64; 2]> = Vec::with_capacity(2 * pts.len());
    for pass in 0..2 {
        let start = out.len();
        let iter: Box<dyn Iterator<Item = &[i64; 2]>> =
            if pass == 0 { Box::new(pts.iter()) } else { Box::new(pts.iter().rev()) };
        for &p in iter {
            while out.len() >= start + 2 && cross2(out[out.len() - 2], out[out.len() - 1], p) <= 0 {
                out.pop();
            }
            out.push(p);
        }
        out.pop();
    }
    out
}

fn inside_2d(ring: &[[i64; 2]], q: [i64; 2]) -> bool {
    (0..ring.len()).all(|n| cross2(ring[n], ring[(n + 1) % ring.len()], q) >= 0)
}

#[derive(Clone, Debug)]
pub(crate) enum Hull {
    Empty,
    Point(P),
    Segment(P, P),
    /// Planar hull: `normal·x = offset`, polygon in the two coordinates left
    /// after dropping `drop_axis`.
    Polygon { normal: P, offset: i64, drop_axis: usize, ring: Vec<[i64; 2]> },
    /// Full-dimensional hull as half-spaces `n·x ≤ d`.
    Polytope(Vec<(P, i64)>),
}

fn project(p: P, drop_axis: usize) -> [i64; 2] {
    match drop_axis {
        0 => [p[1], p[2]],
        1 => [p[0], p[2]],
        _ => [p[0], p[1]],
    }
}

impl Hull {
    pub(crate) fn build(mut pts: Vec<P>) -> Hull {
        pts.sort_unstable();
        pts.dedup();
        let Some(&p0) = pts.first() else {
            return Hull::Empty;
        };
        if pts.len() == 1 {
            return Hull::Point(p0);
        }
        let far = |f: &dyn Fn(P) -> i64| pts.iter().copied().max_by_key(|&p| f(p)).expect("non-empty");
        let p1 = far(&|p| dot(sub(p, p0), sub(p, p0)));
        let p2 = far(&|p| {
            let c = cross(sub(p1, p0), sub(p, p0));
            dot(c, c)
        });
        let normal = cross(sub(p1, p0), sub(p2, p0));
        if normal == [0; 3] {
            // lexicographic order is monotone along a line
            return Hull::Segment(p0, *pts.last().expect("non-empty"));
        }
        let p3 = far(&|p| orient(p0, p1, p2, p).abs());
        if orient(p0, p1, p2, p3) == 0 {
            let drop_axis = (0..3).max_by_key(|&a| normal[a].abs()).expect("three axes");
            let ring = hull_2d(pts.iter().map(|&p| project(p, drop_axis)).collect());
            return Hull::Polygon { normal, offset: dot(normal, p0), drop_axis, ring };
        }

        let verts = [p0, p1, p2, p3];
        let mut faces: Vec<[P; 3]> = [[0, 1, 2, 3], [0, 1, 3, 2], [0, 2, 3, 1], [1, 2, 3, 0]]
            .iter()
            .map(|&[a, b, c, opp]| {
                let (a, b, c) = (verts[a], verts[b], verts[c]);
                if orient(a, b, c, verts[opp]) > 0 { [a, c, b] } else { [a, b, c] }
            })
            .collect();
        for &p in &pts {
            if verts.contains(&p) {
                continue;
            }
            let (visible, keep): (Vec<[P; 3]>, Vec<[P; 3]>) =
                faces.into_iter().partition(|f| orient(f[0], f[1], f[2], p) > 0);
            faces = keep;
            if visible.is_empty() {
                continue;
            }
            let edges: HashSet<(P, P)> =
                visible.iter().flat_map(|f| [(f[0], f[1]), (f[1], f[2]), (f[2], f[0])]).collect();
            let mut horizon: Vec<(P, P)> = edges.iter().copied().filter(|&(u, v)| !edges.contains(&(v, u))).collect();
            horizon.sort_unstable();
            faces.extend(horizon.into_iter().map(|(u, v)| [u, v, p]));
        }
        let mut planes: Vec<(P, i64)> = faces
            .iter()
            .map(|f| {
                let n = cross(sub(f[1], f[0]), sub(f[2], f[0]));
                (n, dot(n, f[0]))
            })
            .collect();
        planes.sort_unstable();
        planes.dedup();
        Hull::Polytope(planes)
    }

    pub(crate) fn contains(&self, x: P) -> bool {
        match self {
            Hull::Empty => false,
            Hull::Point(p) => *p == x,
            Hull::Segment(a, b) => {
                let (d, e) = (sub(*b, *a), sub(x, *a));
                cross(d, e) == [0; 3] && dot(d, e) >= 0 && dot(d, e) <= dot(d, d)
            }
            Hull::Polygon { normal, offset, drop_axis, ring } => {
                dot(*normal, x) == *offset && inside_2d(ring, project(x, *drop_axis))
            }
            Hull::Polytope(planes) => planes.iter().all(|(n, d)| dot(*n, x) <= *d),
        }
    }

    /// Voxels of a `dims` grid whose centres lie in the closed hull.
    pub(crate) fn voxelize(&self, dims: [usize; 3]) -> Vec<bool> {
        let [nx, ny, nz] = dims;
        let mut out = vec![false; nx * ny * nz];
        match self {
            Hull::Polytope(planes) => {
                out.par_chunks_mut(nx).enumerate().for_each(|(row, chunk)| {
                    let (j, k) = ((row % ny) as i64, (row / ny) as i64);
                    let (mut lo, mut hi) = (0i64, nx as i64 - 1);
                    for (n, d) in planes {
                        let r = d - n[1] * j - n[2] * k;
                        if n[0] == 0 {
                            if r < 0 {
                                return;
                            }
                        } else if n[0] > 0 {
                            hi = hi.min(floor_div(r, n[0]));
                        } else {
                            lo = lo.max(-floor_div(-r, n[0]));
                        }
                        if lo > hi {
                            return;
                        }
                    }
                    for v in &mut chunk[lo as usize..=hi as usize] {
                        *v = true;
                    }
                });
            }
            Hull::Empty => {}
            _ => {
                // lower-dimensional hulls: direct test (degenerate lungs only)
                out.par_iter_mut().enumerate().for_each(|(lin, v)| {
                    let p = [(lin % nx) as i64, ((lin / nx) % ny) as i64, (lin / (nx * ny)) as i64];
                    *v = self.contains(p);
                });
            }
        }
        out
    }
}

fn floor_div(a: i64, b: i64) -> i64 {
    let q = a / b;
    if a % b != 0 && ((a < 0) != (b < 0)) { q - 1 } else { q }
}

/// Hull candidates of a voxel mask: per-slice 2D hull vertices of the row
/// extremes (the 3D hull of these equals the hull of all voxels).
pub(crate) fn candidate_points(mask: &[bool], dims: [usize; 3]) -> Vec<P> {
    let [nx, ny, nz] = dims;
    (0..nz)
        .into_par_iter()
        .flat_map_iter(|k| {
            let mut slice = Vec::new();
            for j in 0..ny {
                let row = &mask[nx * (j + ny * k)..nx * (j + ny * k + 1)];
                if let (Some(a), Some(b)) = (row.iter().position(|&v| v), row.iter().rposition(|&v| v)) {
                    slice.push([a as i64, j as i64]);
                    slice.push([b as i64, j as i64]);
                }
            }
            hull_2d(slice).into_iter().map(move |[i, j]| [i, j, k as i64])
        })
        .collect()
}
