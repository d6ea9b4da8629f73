//! On-the-fly smoothing of emitted ladder blocks.

use crate::diffusion::Frame;

/// Norm below which a frame is treated as direction-less.
const MIN_NORM: f64 = 1e-9;

/// Cosine similarity, or `None` when either vector is (near) zero.
pub fn cosine(a: &[f64], b: &[f64]) -> Option<f64> {
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na < MIN_NORM || nb < MIN_NORM {
        return None;
    }
    Some(a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb))
}

/// Smooth a freshly emitted block against the previously emitted frame.
///
/// Offsets count from the boundary: offset 0 is `prev`, offsets `1..=l` are
/// the block. For `k = 1..=l/2`, the frame at offset `2k-1` becomes the mean
/// of its neighbours at `2k-2` and `2k` when their cosine similarity is at
/// least `tau`.
pub fn ofs_smooth(block: &[Frame], prev: &[f64], tau: f64) -> Vec<Frame> {
    let mut out = block.to_vec();
    let at = |o: usize| -> &[f64] {
        if o == 0 {
            prev
        } else {
            &block[o - 1]
        }
    };
    for k in 1..=block.len() / 2 {
        let (left, right) = (at(2 * k - 2), at(2 * k));
        if matches!(cosine(left, right), Some(c) if c >= tau) {
            out[2 * k - 2] = left.iter().zip(right).map(|(a, b)| 0.5 * (a + b)).collect();
        }
    }
    out
}

/// Apply [`ofs_smooth`] to consecutive blocks of `l` frames, the way the
/// ladder sampler does while emitting. The first block has no predecessor and
/// is left untouched.
pub fn ofs_sequence(frames: &[Frame], l: usize, tau: f64) -> Vec<Frame> {
    let mut out: Vec<Frame> = Vec::with_capacity(frames.len());
    for (b, block) in frames.chunks(l.max(1)).enumerate() {
        if b == 0 {
            out.extend_from_slice(block);
            continue;
        }
        let prev = out.last().expect("previous block emitted").clone();
        out.extend(ofs_smooth(block, &prev, tau));
    }
    out
}
