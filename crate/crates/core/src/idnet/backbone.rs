use rand::Rng;

use crate::autodiff::{Graph, ParamSet, Tensor, Var};
use crate::grid::CHANNELS;
use crate::nn::{Conv, LEAKY_SLOPE};

/// Stack of conv-conv stages; every stage after the first halves the map
/// with a 2×2 average pool before convolving.
#[derive(Debug, Clone)]
pub(crate) struct Backbone {
    stages: Vec<(Conv, Conv)>,
}

impl Backbone {
    pub(crate) fn new(params: &mut ParamSet, widths: &[usize], rng: &mut impl Rng) -> Self {
        let mut stages = Vec::with_capacity(widths.len());
        let mut cin = CHANNELS;
        for (i, &w) in widths.iter().enumerate() {
            stages.push((
                Conv::new(params, &format!("stage{}.a", i + 1), cin, w, 3, rng),
                Conv::new(params, &format!("stage{}.b", i + 1), w, w, 3, rng),
            ));
            cin = w;
        }
        Self { stages }
    }

    /// Returns the activation at the end of every stage.
    pub(crate) fn forward(&self, g: &mut Graph, vars: &[Var], x: Var) -> Vec<Var> {
        let mut taps = Vec::with_capacity(self.stages.len());
        let mut h = x;
        for (i, (a, b)) in self.stages.iter().enumerate() {
            if i > 0 {
                h = g.avg_pool(h, 2, 2);
            }
            h = a.forward(g, vars, h);
            h = g.leaky_relu(h, LEAKY_SLOPE);
            h = b.forward(g, vars, h);
            h = g.leaky_relu(h, LEAKY_SLOPE);
            taps.push(h);
        }
        taps
    }
}

/// Root-mean-square of every channel of every stage over a set of forward
/// passes. `taps[i][s]` is stage `s` of sample `i`, planar `c × h × w`.
pub(crate) fn channel_rms(taps: &[Vec<Tensor>]) -> Vec<Vec<f64>> {
    let Some(first) = taps.first() else {
        return Vec::new();
    };
    (0..first.len())
        .map(|s| {
            let c = first[s].shape[0];
            let hw = first[s].len() / c;
            let mut acc = vec![0.0; c];
            for sample in taps {
                for (a, chunk) in acc.iter_mut().zip(sample[s].data.chunks(hw)) {
                    *a += chunk.iter().map(|v| v * v).sum::<f64>();
                }
            }
            acc.iter().map(|a| (a / (taps.len() * hw) as f64).sqrt()).collect()
        })
        .collect()
}

impl Backbone {
    /// Rescales every stage output channel to unit RMS and compensates in
    /// the consumer of that channel, so the network function is unchanged.
    /// Valid because leaky ReLU and average pooling commute with positive
    /// scaling. `head` is the `parts × dout × din` weight that reads the
    /// last stage. Channels with RMS below `1e-8` are left alone.
    pub(crate) fn equalize(&self, params: &mut ParamSet, rms: &[Vec<f64>], head: usize) {
        assert_eq!(rms.len(), self.stages.len());
        for (s, (_, b)) in self.stages.iter().enumerate() {
            let factors: Vec<f64> = rms[s].iter().map(|&r| if r > 1e-8 { 1.0 / r } else { 1.0 }).collect();
            let c = factors.len();
            let w = params.get_mut(b.w);
            let per_out = w.len() / c;
            for (chunk, f) in w.data.chunks_mut(per_out).zip(&factors) {
                chunk.iter_mut().for_each(|v| *v *= f);
            }
            for (v, f) in params.get_mut(b.b).data.iter_mut().zip(&factors) {
                *v *= f;
            }
            // Conv weights are `cout × cin × k × k`; linear weights end in
            // the input axis.
            if let Some((next, _)) = self.stages.get(s + 1) {
                let w = params.get_mut(next.w);
                let (cout, k) = (w.shape[0], w.shape[2] * w.shape[3]);
                for o in 0..cout {
                    for (i, f) in factors.iter().enumerate() {
                        let at = (o * c + i) * k;
                        w.data[at..at + k].iter_mut().for_each(|v| *v /= f);
                    }
                }
            } else {
                let w = params.get_mut(head);
                for row in w.data.chunks_mut(c) {
                    for (v, f) in row.iter_mut().zip(&factors) {
                        *v /= f;
                    }
                }
            }
        }
    }
}

/// Spatial size after `stages` stages.
pub(crate) fn final_dims(input: (usize, usize), stages: usize) -> (usize, usize) {
    let f = 1usize << stages.saturating_sub(1);
    (input.0 / f, input.1 / f)
}
