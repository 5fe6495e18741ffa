//! Index arithmetic shared by the broadcasting, reduction and softmax kernels.

use crate::error::{Error, Result};

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

pub(crate) fn contiguous_strides(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![0; shape.len()];
    let mut acc = 1;
    for (s, &d) in strides.iter_mut().zip(shape).rev() {
        *s = acc;
        acc *= d;
    }
    strides
}

/// Output shape of a singleton-axis broadcast between two equal-rank shapes.
pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    if a.len() != b.len() {
        return Err(Error::Dimension(format!(
            "cannot broadcast {a:?} with {b:?}: rank differs"
        )));
    }
    a.iter()
        .zip(b)
        .map(|(&x, &y)| match (x, y) {
            _ if x == y => Ok(x),
            (1, _) => Ok(y),
            (_, 1) => Ok(x),
            _ => Err(Error::Dimension(format!("cannot broadcast {a:?} with {b:?}"))),
        })
        .collect()
}

/// Strides of `shape` addressed with indices of `target`; broadcast axes get stride 0.
pub(crate) fn broadcast_strides(shape: &[usize], target: &[usize]) -> Vec<usize> {
    contiguous_strides(shape)
        .into_iter()
        .zip(shape.iter().zip(target))
        .map(|(s, (&d, &t))| if d == 1 && t != 1 { 0 } else { s })
        .collect()
}

/// Validates an axis set and returns it sorted and deduplicated.
pub(crate) fn normalize_axes(axes: &[usize], rank: usize) -> Result<Vec<usize>> {
    if axes.is_empty() {
        return Err(Error::Config("empty reduction axis set".into()));
    }
    let mut out = axes.to_vec();
    out.sort_unstable();
    out.dedup();
    if let Some(&bad) = out.iter().find(|&&a| a >= rank) {
        return Err(Error::Config(format!("axis {bad} out of range for rank {rank}")));
    }
    Ok(out)
}

/// Shape after reducing `axes` to extent 1 (dimensions are kept).
pub(crate) fn reduced_shape(shape: &[usize], axes: &[usize]) -> Vec<usize> {
    shape
        .iter()
        .enumerate()
        .map(|(i, &d)| if axes.contains(&i) { 1 } else { d })
        .collect()
}

/// Strides mapping an input index to its reduction group in the kept-dims output.
pub(crate) fn group_strides(shape: &[usize], axes: &[usize]) -> Vec<usize> {
    let reduced = reduced_shape(shape, axes);
    contiguous_strides(&reduced)
        .into_iter()
        .enumerate()
        .map(|(i, s)| if axes.contains(&i) { 0 } else { s })
        .collect()
}

/// Visits every element of `shape` in row-major order, passing the flat index and
/// the offsets produced by each stride vector.
pub(crate) fn walk<const K: usize>(
    shape: &[usize],
    strides: [&[usize]; K],
    mut f: impl FnMut(usize, [usize; K]),
) {
    let n = numel(shape);
    let rank = shape.len();
    if rank == 0 {
        f(0, [0; K]);
        return;
    }
    let mut idx = vec![0usize; rank];
    let mut off = [0usize; K];
    for flat in 0..n {
        f(flat, off);
        let mut d = rank - 1;
        loop {
            idx[d] += 1;
            for k in 0..K {
                off[k] += strides[k][d];
            }
            if idx[d] < shape[d] {
                break;
            }
            for k in 0..K {
                off[k] -= strides[k][d] * shape[d];
            }
            idx[d] = 0;
            if d == 0 {
                break;
            }
            d -= 1;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn walk_matches_div_mod_indexing() {
        let shape = [2, 3, 4];
        let target = [2, 3, 4];
        let bshape = [1, 3, 1];
        let bs = broadcast_strides(&bshape, &target);
        let cs = contiguous_strides(&shape);
        let mut seen = Vec::new();
        walk(&shape, [&cs, &bs], |flat, [a, b]| seen.push((flat, a, b)));
        assert_eq!(seen.len(), 24);
        for (flat, a, b) in seen {
            assert_eq!(flat, a);
            let j = (flat / 4) % 3;
            assert_eq!(b, j);
        }
    }

    #[test]
    fn broadcast_rules() {
        assert_eq!(broadcast_shape(&[2, 1, 3], &[1, 4, 3]).unwrap(), vec![2, 4, 3]);
        assert!(broadcast_shape(&[2, 3], &[3, 3]).is_err());
        assert!(broadcast_shape(&[3], &[1, 3]).is_err());
    }

    #[test]
    fn empty_axes_rejected() {
        assert!(matches!(normalize_axes(&[], 3), Err(Error::Config(_))));
        assert!(normalize_axes(&[3], 3).is_err());
        assert_eq!(normalize_axes(&[2, 0, 2], 3).unwrap(), vec![0, 2]);
    }
}
