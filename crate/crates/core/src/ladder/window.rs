//! Window partition/merge, cyclic shifts, shifted-window region masks and
//! the relative position index. All of these are index remappings on the
//! `(n, c, h, w)` layout, applied through [`Graph::gather`].

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tensor::{Graph, Shape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Default)]
pub struct ShiftSpec {
    pub dy: i64,
    pub dx: i64,
}

impl ShiftSpec {
    pub const ZERO: ShiftSpec = ShiftSpec { dy: 0, dx: 0 };

    pub fn new(dy: i64, dx: i64) -> Self {
        ShiftSpec { dy, dx }
    }

    pub fn diag(s: i64) -> Self {
        ShiftSpec { dy: s, dx: s }
    }

    pub fn is_zero(&self) -> bool {
        self.dy == 0 && self.dx == 0
    }

    pub fn inverse(&self) -> Self {
        ShiftSpec {
            dy: -self.dy,
            dx: -self.dx,
        }
    }

    pub fn check(&self, window: usize) -> Result<()> {
        let m = window as i64;
        if self.dy.abs() >= m || self.dx.abs() >= m {
            return Err(Error::Config {
                path: "ladder.shift".into(),
                msg: format!(
                    "shift ({}, {}) must be smaller than window {window}",
                    self.dy, self.dx
                ),
            });
        }
        Ok(())
    }
}

impl std::fmt::Display for ShiftSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "({},{})", self.dy, self.dx)
    }
}

/// Diagonal strides used at window 7, in branch order. Entry 0 is the
/// unshifted branch.
const BASE_STRIDES: [i64; 6] = [0, 3, -3, 1, -1, 5];

/// Default per-branch shifts for `branches` at window `m`.
///
/// At `m = 7` this is the base schedule. Smaller windows scale each stride
/// by `m / 7`, round, and clamp into `[1, m - 1]`; duplicates are then
/// bumped to the next free stride so the schedule stays distinct.
pub fn default_shifts(branches: usize, m: usize) -> Result<Vec<ShiftSpec>> {
    if branches == 0 || branches > BASE_STRIDES.len() {
        return Err(Error::config(
            "ladder.branches",
            format!("no default shift schedule for {branches} branches (supported: 1..=6)"),
        ));
    }
    let mi = m as i64;
    let mut out: Vec<ShiftSpec> = vec![ShiftSpec::ZERO];
    for &s in &BASE_STRIDES[1..branches] {
        let mut mag = if m == 7 {
            s.abs()
        } else {
            ((s.abs() as f64 * m as f64 / 7.0).round() as i64).clamp(1, (mi - 1).max(1))
        };
        let sign = s.signum();
        let mut cand = ShiftSpec::diag(sign * mag);
        let mut tries = 0;
        while out.contains(&cand) && tries < 2 * mi {
            mag = mag % (mi - 1).max(1) + 1;
            cand = ShiftSpec::diag(sign * mag);
            tries += 1;
        }
        if out.contains(&cand) {
            return Err(Error::config(
                "ladder.window",
                format!("window {m} too small for {branches} distinct shifts"),
            ));
        }
        out.push(cand);
    }
    Ok(out)
}

fn check_divisible(op: &str, h: usize, w: usize, m: usize) -> Result<()> {
    if m == 0 || !h.is_multiple_of(m) || !w.is_multiple_of(m) {
        return Err(Error::config(
            "ladder.window",
            format!("{op}: spatial {h}x{w} not divisible by window {m}; pad upstream"),
        ));
    }
    Ok(())
}

/// For each element of the partitioned tensor `(n*nw, c, m, m)`, the flat
/// index of its source in `(n, c, h, w)`.
pub fn partition_index(shape: Shape, m: usize) -> Result<Vec<usize>> {
    let [n, c, h, w] = shape;
    check_divisible("window_partition", h, w, m)?;
    let (nwy, nwx) = (h / m, w / m);
    let mut idx = Vec::with_capacity(n * c * h * w);
    for b in 0..n {
        for wy in 0..nwy {
            for wx in 0..nwx {
                for ch in 0..c {
                    for i in 0..m {
                        let row = ((b * c + ch) * h + wy * m + i) * w + wx * m;
                        idx.extend(row..row + m);
                    }
                }
            }
        }
    }
    Ok(idx)
}

/// Inverse of [`partition_index`]: source in the window tensor for every
/// element of the merged `(n, c, h, w)` map.
pub fn merge_index(shape: Shape, m: usize) -> Result<Vec<usize>> {
    let [n, c, h, w] = shape;
    check_divisible("window_merge", h, w, m)?;
    let (nwy, nwx) = (h / m, w / m);
    let mut idx = Vec::with_capacity(n * c * h * w);
    for b in 0..n {
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    let win = (b * nwy + y / m) * nwx + x / m;
                    idx.push(((win * c + ch) * m + y % m) * m + x % m);
                }
            }
        }
    }
    Ok(idx)
}

/// `out[(i + dy) mod h][(j + dx) mod w] = x[i][j]`.
pub fn shift_index(shape: Shape, s: ShiftSpec) -> Vec<usize> {
    let [n, c, h, w] = shape;
    let mut idx = Vec::with_capacity(n * c * h * w);
    for plane in 0..n * c {
        for y in 0..h {
            let sy = (y as i64 - s.dy).rem_euclid(h as i64) as usize;
            for x in 0..w {
                let sx = (x as i64 - s.dx).rem_euclid(w as i64) as usize;
                idx.push((plane * h + sy) * w + sx);
            }
        }
    }
    idx
}

fn apply(t: &Tensor, shape: Shape, idx: &[usize]) -> Tensor {
    let data = idx.iter().map(|&i| t.data()[i]).collect();
    Tensor::new(shape, data).expect("index length matches shape")
}

pub fn partitioned_shape(shape: Shape, m: usize) -> Shape {
    let [n, c, h, w] = shape;
    [n * (h / m) * (w / m), c, m, m]
}

pub fn window_partition(x: &Tensor, m: usize) -> Result<Tensor> {
    let idx = partition_index(x.shape(), m)?;
    Ok(apply(x, partitioned_shape(x.shape(), m), &idx))
}

/// Reassembles windows into `(n, c, h, w)`; `n` is inferred.
pub fn window_merge(x: &Tensor, m: usize, h: usize, w: usize) -> Result<Tensor> {
    let shape = merged_shape(x.shape(), m, h, w)?;
    let idx = merge_index(shape, m)?;
    Ok(apply(x, shape, &idx))
}

fn merged_shape(win_shape: Shape, m: usize, h: usize, w: usize) -> Result<Shape> {
    check_divisible("window_merge", h, w, m)?;
    let per = (h / m) * (w / m);
    let [nw, c, wh, ww] = win_shape;
    if wh != m || ww != m || nw % per != 0 {
        return Err(Error::dim(
            "window_merge",
            format!("windows {win_shape:?} do not tile {h}x{w} with window {m}"),
        ));
    }
    Ok([nw / per, c, h, w])
}

pub fn cyclic_shift(x: &Tensor, s: ShiftSpec) -> Tensor {
    apply(x, x.shape(), &shift_index(x.shape(), s))
}

pub fn inverse_shift(x: &Tensor, s: ShiftSpec) -> Tensor {
    cyclic_shift(x, s.inverse())
}

pub fn g_partition(g: &mut Graph, x: Var, m: usize) -> Result<Var> {
    let idx = partition_index(x.shape(), m)?;
    g.gather(x, partitioned_shape(x.shape(), m), Arc::new(idx))
}

pub fn g_merge(g: &mut Graph, x: Var, m: usize, h: usize, w: usize) -> Result<Var> {
    let shape = merged_shape(x.shape(), m, h, w)?;
    let idx = merge_index(shape, m)?;
    g.gather(x, shape, Arc::new(idx))
}

pub fn g_shift(g: &mut Graph, x: Var, s: ShiftSpec) -> Result<Var> {
    if s.is_zero() {
        return Ok(x);
    }
    g.gather(x, x.shape(), Arc::new(shift_index(x.shape(), s)))
}

/// Region id of every token of every window of one shifted `h x w` map,
/// laid out `(window, token)`. A token is tagged by whether its source row
/// and column wrapped around the border; attention is allowed only between
/// equal tags. With a zero shift every tag is 0.
pub fn region_ids(h: usize, w: usize, m: usize, s: ShiftSpec) -> Result<Vec<u32>> {
    check_divisible("region_ids", h, w, m)?;
    let wrapped = |p: usize, d: i64, len: usize| -> u32 {
        let src = p as i64 - d;
        u32::from(src < 0 || src >= len as i64)
    };
    let (nwy, nwx) = (h / m, w / m);
    let mut ids = Vec::with_capacity(h * w);
    for wy in 0..nwy {
        for wx in 0..nwx {
            for i in 0..m {
                for j in 0..m {
                    let ry = wrapped(wy * m + i, s.dy, h);
                    let rx = wrapped(wx * m + j, s.dx, w);
                    ids.push(ry * 2 + rx);
                }
            }
        }
    }
    Ok(ids)
}

/// `index[i * m² + j]` selects the bias-table entry for query `i`, key `j`.
pub fn relative_position_index(m: usize) -> Vec<usize> {
    let t = m * m;
    let span = 2 * m - 1;
    let mut idx = Vec::with_capacity(t * t);
    for i in 0..t {
        let (yi, xi) = (i / m, i % m);
        for j in 0..t {
            let (yj, xj) = (j / m, j % m);
            idx.push((yi + m - 1 - yj) * span + (xi + m - 1 - xj));
        }
    }
    idx
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn base_schedules() {
        let s3 = default_shifts(3, 7).unwrap();
        assert_eq!(
            s3,
            vec![ShiftSpec::ZERO, ShiftSpec::diag(3), ShiftSpec::diag(-3)]
        );
        let s6 = default_shifts(6, 7).unwrap();
        let strides: Vec<i64> = s6.iter().map(|s| s.dy).collect();
        assert_eq!(strides, vec![0, 3, -3, 1, -1, 5]);
    }

    #[test]
    fn scaled_schedule_is_distinct_and_in_range() {
        for m in 2..=7 {
            for b in 1..=6 {
                let Ok(s) = default_shifts(b, m) else {
                    continue;
                };
                for (i, a) in s.iter().enumerate() {
                    a.check(m).unwrap();
                    assert!(s[i + 1..].iter().all(|b| b != a), "m={m} b={b} {s:?}");
                }
            }
        }
        assert_eq!(
            default_shifts(3, 4).unwrap(),
            vec![ShiftSpec::ZERO, ShiftSpec::diag(2), ShiftSpec::diag(-2)]
        );
    }

    #[test]
    fn region_ids_zero_shift_all_same() {
        assert!(region_ids(14, 14, 7, ShiftSpec::ZERO)
            .unwrap()
            .iter()
            .all(|&r| r == 0));
    }

    #[test]
    fn region_ids_split_wrapped_rows() {
        let ids = region_ids(14, 14, 7, ShiftSpec::diag(3)).unwrap();
        // first window: rows 0..3 came from the bottom, columns 0..3 from the right
        assert_eq!(ids[0], 3);
        assert_eq!(ids[3 * 7 + 3], 0);
        assert_eq!(ids[3], 2);
        // last window holds no wrapped tokens
        assert!(ids[3 * 49..].iter().all(|&r| r == 0));
    }

    #[test]
    fn relpos_index_center_and_corners() {
        let m = 3;
        let idx = relative_position_index(m);
        let span = 2 * m - 1;
        let center = (m - 1) * span + (m - 1);
        for i in 0..m * m {
            assert_eq!(idx[i * m * m + i], center);
        }
        // token 0 against token 8, then the reverse
        assert_eq!(idx[8], 0);
        assert_eq!(idx[8 * 9], span * span - 1);
    }
}
