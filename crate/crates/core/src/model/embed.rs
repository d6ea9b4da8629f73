/// Sinusoidal embedding of a noise level at geometric frequencies:
/// `[sin(t w_0), cos(t w_0), sin(t w_1), cos(t w_1), ...]`, `w_i = 10000^(-2i/dim)`.
pub fn time_embed(t: usize, dim: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(dim);
    time_embed_into(t, dim, &mut out);
    out
}

pub(crate) fn time_embed_into(t: usize, dim: usize, out: &mut Vec<f64>) {
    for i in 0..dim.div_ceil(2) {
        let freq = 10_000f64.powf(-2.0 * i as f64 / dim as f64);
        let phase = t as f64 * freq;
        out.push(phase.sin());
        if 2 * i + 1 < dim {
            out.push(phase.cos());
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn level_zero_pattern() {
        let e = time_embed(0, 8);
        assert_eq!(e, vec![0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
        assert_eq!(time_embed(5, 7).len(), 7);
    }

    #[test]
    fn all_levels_distinct() {
        let embs: Vec<Vec<f64>> = (0..=1000).map(|t| time_embed(t, 32)).collect();
        let mut min_d = f64::INFINITY;
        for a in 0..embs.len() {
            for b in a + 1..embs.len() {
                let d: f64 = embs[a].iter().zip(&embs[b]).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
                min_d = min_d.min(d);
            }
        }
        assert!(min_d > 1e-6, "closest pair {min_d}");
    }
}
