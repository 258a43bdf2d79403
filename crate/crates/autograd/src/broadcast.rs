//! Same-rank broadcasting helpers (a dimension broadcasts when it is 1).

use crate::error::{Error, Result};
use crate::tensor::strides;

pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!("rank mismatch {:?} vs {:?}", a, b)));
    }
    a.iter()
        .zip(b)
        .map(|(&x, &y)| match (x, y) {
            _ if x == y => Ok(x),
            (1, _) => Ok(y),
            (_, 1) => Ok(x),
            _ => Err(Error::Shape(format!("cannot broadcast {:?} with {:?}", a, b))),
        })
        .collect()
}

/// Strides of `shape` viewed inside `out`, zero along broadcast dims.
fn view_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let s = strides(shape);
    shape
        .iter()
        .zip(out)
        .zip(s)
        .map(|((&d, &o), st)| if d == 1 && o != 1 { 0 } else { st })
        .collect()
}

/// Visits every output position with the matching flat offsets into `a` and `b`.
pub fn for_each(out: &[usize], a: &[usize], b: &[usize], mut f: impl FnMut(usize, usize, usize)) {
    let total: usize = out.iter().product();
    if total == 0 {
        return;
    }
    let sa = view_strides(a, out);
    let sb = view_strides(b, out);
    let rank = out.len();
    if rank == 0 {
        f(0, 0, 0);
        return;
    }
    let mut idx = vec![0usize; rank];
    let (mut ia, mut ib) = (0usize, 0usize);
    let last = rank - 1;
    let (la, lb, ln) = (sa[last], sb[last], out[last]);
    let mut o = 0;
    loop {
        let (mut pa, mut pb) = (ia, ib);
        for _ in 0..ln {
            f(o, pa, pb);
            o += 1;
            pa += la;
            pb += lb;
        }
        // advance the outer dims
        let mut d = last;
        loop {
            if d == 0 {
                return;
            }
            d -= 1;
            idx[d] += 1;
            ia += sa[d];
            ib += sb[d];
            if idx[d] < out[d] {
                break;
            }
            ia -= sa[d] * out[d];
            ib -= sb[d] * out[d];
            idx[d] = 0;
        }
    }
}
