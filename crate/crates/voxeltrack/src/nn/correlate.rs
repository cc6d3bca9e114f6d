//! Dense cross-correlation of a target feature map over a search feature
//! map, the similarity core of the tracker, with gradients w.r.t. both
//! operands.

use super::Tensor;
use crate::error::{Error, Result};

/// Slides `target` (`[c, th, tw]`) over `search` (`[c, sh, sw]`) and sums
/// elementwise products over all channels. Output is the 2D score map
/// `[sh - th + 1, sw - tw + 1]`.
pub fn cross_correlate(search: &Tensor, target: &Tensor) -> Result<Tensor> {
    let &[sc, sh, sw] = search.shape() else {
        return Err(Error::shape("search features must be 3D"));
    };
    let &[tc, th, tw] = target.shape() else {
        return Err(Error::shape("target features must be 3D"));
    };
    if sc != tc {
        return Err(Error::shape(format!(
            "channel mismatch: search {sc} vs target {tc}"
        )));
    }
    if th > sh || tw > sw {
        return Err(Error::shape(format!(
            "target {th}x{tw} larger than search {sh}x{sw}"
        )));
    }
    let (oh, ow) = (sh - th + 1, sw - tw + 1);
    let mut out = Tensor::zeros(&[oh, ow]);
    let sdat = search.data();
    let tdat = target.data();
    let odat = out.data_mut();
    for oy in 0..oh {
        for ox in 0..ow {
            let mut acc = 0.0;
            for c in 0..sc {
                let sbase = c * sh * sw;
                let tbase = c * th * tw;
                for ty in 0..th {
                    let srow = sbase + (oy + ty) * sw + ox;
                    let trow = tbase + ty * tw;
                    for tx in 0..tw {
                        acc += sdat[srow + tx] * tdat[trow + tx];
                    }
                }
            }
            odat[oy * ow + ox] = acc;
        }
    }
    Ok(out)
}

/// Gradients of [`cross_correlate`] w.r.t. both operands.
pub fn cross_correlate_backward(
    search: &Tensor,
    target: &Tensor,
    grad_out: &Tensor,
) -> Result<(Tensor, Tensor)> {
    let &[c, sh, sw] = search.shape() else {
        return Err(Error::shape("search features must be 3D"));
    };
    let &[_, th, tw] = target.shape() else {
        return Err(Error::shape("target features must be 3D"));
    };
    let (oh, ow) = (sh - th + 1, sw - tw + 1);
    if grad_out.shape() != [oh, ow] {
        return Err(Error::shape(format!(
            "correlation grad shape {:?}, expected {:?}",
            grad_out.shape(),
            [oh, ow]
        )));
    }
    let mut grad_search = Tensor::zeros(search.shape());
    let mut grad_target = Tensor::zeros(target.shape());
    let sdat = search.data();
    let tdat = target.data();
    let gdat = grad_out.data();
    let gs = grad_search.data_mut();
    let gt = grad_target.data_mut();
    for oy in 0..oh {
        for ox in 0..ow {
            let g = gdat[oy * ow + ox];
            if g == 0.0 {
                continue;
            }
            for ch in 0..c {
                let sbase = ch * sh * sw;
                let tbase = ch * th * tw;
                for ty in 0..th {
                    let srow = sbase + (oy + ty) * sw + ox;
                    let trow = tbase + ty * tw;
                    for tx in 0..tw {
                        gs[srow + tx] += g * tdat[trow + tx];
                        gt[trow + tx] += g * sdat[srow + tx];
                    }
                }
            }
        }
    }
    Ok((grad_search, grad_target))
}
