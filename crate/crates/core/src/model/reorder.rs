//! Density-aware reordering: pixels grouped by predicted class (anode,
//! cathode, background), raster order inside each group.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum PixelClass {
    Anode,
    Cathode,
    Background,
}

/// Argmax over `(anode, cathode, 1 - max(anode, cathode))`; ties resolve to
/// the earlier class.
pub fn classify<T: Scalar>(anode: T, cathode: T) -> PixelClass {
    let bg = T::one() - anode.max(cathode);
    if anode >= cathode && anode >= bg {
        PixelClass::Anode
    } else if cathode >= bg {
        PixelClass::Cathode
    } else {
        PixelClass::Background
    }
}

/// Sequence order for a `[2, H, W]` map of class scores: entry `i` is the
/// raster position of the `i`-th sequence element.
pub fn reorder_index<T: Scalar>(scores: &Tensor<T>) -> Result<Vec<usize>> {
    let s = scores.shape();
    if s.len() != 3 || s[0] != 2 {
        return Err(Error::shape(&[2, s.get(1).copied().unwrap_or(0), s.get(2).copied().unwrap_or(0)], s));
    }
    let n = s[1] * s[2];
    let (an, ca) = scores.data().split_at(n);
    let mut blocks: [Vec<usize>; 3] = Default::default();
    for i in 0..n {
        blocks[classify(an[i], ca[i]) as usize].push(i);
    }
    Ok(blocks.concat())
}

/// Reorders `[C, H, W]` features into a `[C, H*W]` sequence.
pub fn density_reorder<T: Scalar>(feature: &Tensor<T>, scores: &Tensor<T>) -> Result<(Tensor<T>, Vec<usize>)> {
    let (c, h, w) = feature.chw();
    if scores.shape().get(1..) != Some(&[h, w][..]) {
        return Err(Error::shape(&[2, h, w], scores.shape()));
    }
    let index = reorder_index(scores)?;
    let n = h * w;
    let mut out = Vec::with_capacity(c * n);
    for ch in 0..c {
        let row = &feature.data()[ch * n..(ch + 1) * n];
        out.extend(index.iter().map(|&i| row[i]));
    }
    Ok((Tensor::from_vec(&[c, n], out)?, index))
}

/// Checks that `index` is a bijection on `0..len`.
pub fn validate_permutation(index: &[usize], len: usize) -> Result<()> {
    if index.len() != len {
        return Err(Error::NotAPermutation(format!("length {} for {} positions", index.len(), len)));
    }
    let mut seen = vec![false; len];
    for &i in index {
        if i >= len || std::mem::replace(&mut seen[i], true) {
            return Err(Error::NotAPermutation(format!("index {i} out of range or repeated")));
        }
    }
    Ok(())
}

/// Places a `[C, H*W]` sequence back onto the `[C, H, W]` grid.
pub fn inverse_reorder<T: Scalar>(sequence: &Tensor<T>, index: &[usize], height: usize, width: usize) -> Result<Tensor<T>> {
    let n = height * width;
    let s = sequence.shape();
    if s.len() != 2 || s[1] != n {
        return Err(Error::shape(&[s.first().copied().unwrap_or(0), n], s));
    }
    validate_permutation(index, n)?;
    let c = s[0];
    let mut out = vec![T::zero(); c * n];
    for ch in 0..c {
        let src = &sequence.data()[ch * n..(ch + 1) * n];
        let dst = &mut out[ch * n..(ch + 1) * n];
        for (k, &i) in index.iter().enumerate() {
            dst[i] = src[k];
        }
    }
    Tensor::from_vec(&[c, height, width], out)
}
