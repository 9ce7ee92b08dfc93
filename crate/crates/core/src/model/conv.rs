//! Desk-scale slice encoder: three convolution blocks and a global max
//! pool. 224x224 input gives 56x56, 28x28 and 14x14 feature maps. The last
//! block is linear so the pooled maximum always carries gradient.

use ndarray::{Array2, ArrayViewD, ArrayViewMutD};
use rand::Rng;

use super::layers::{
    global_max_pool, global_max_pool_backward, join, relu_backward, relu_inplace, Conv2d, FeatureMap, Parameters,
};

const STEM_CHANNELS: usize = 8;
const MID_CHANNELS: usize = 16;

#[derive(Debug, Clone, PartialEq)]
pub struct SmallConvEncoder {
    pub stem: Conv2d,
    pub block2: Conv2d,
    pub block3: Conv2d,
}

#[derive(Debug)]
pub struct SmallConvCache {
    cols1: Array2<f64>,
    out1: FeatureMap,
    cols2: Array2<f64>,
    out2: FeatureMap,
    cols3: Array2<f64>,
    out3: FeatureMap,
    argmax: Vec<usize>,
}

impl SmallConvEncoder {
    pub fn new(in_channels: usize, embedding_dim: usize, rng: &mut impl Rng) -> Self {
        Self {
            stem: Conv2d::new(in_channels, STEM_CHANNELS, 4, 4, 0, rng),
            block2: Conv2d::new(STEM_CHANNELS, MID_CHANNELS, 3, 2, 1, rng),
            block3: Conv2d::new(MID_CHANNELS, embedding_dim, 3, 2, 1, rng),
        }
    }

    pub fn embedding_dim(&self) -> usize {
        self.block3.out_channels
    }

    pub fn forward(&self, x: &FeatureMap) -> (Array2<f64>, SmallConvCache) {
        let (mut out1, cols1) = self.stem.forward(x);
        relu_inplace(&mut out1.data);
        let (mut out2, cols2) = self.block2.forward(&out1);
        relu_inplace(&mut out2.data);
        let (out3, cols3) = self.block3.forward(&out2);
        let (pooled, argmax) = global_max_pool(&out3);
        (
            pooled,
            SmallConvCache {
                cols1,
                out1,
                cols2,
                out2,
                cols3,
                out3,
                argmax,
            },
        )
    }

    pub fn backward(&self, cache: &SmallConvCache, d_embed: &Array2<f64>, grad: &mut Self) {
        let c = cache;
        let d3 = global_max_pool_backward(d_embed, &c.argmax, c.out3.data.nrows());
        let mut d2 = self
            .block3
            .backward(&c.cols3, &d3, &mut grad.block3, Some((c.out2.n, c.out2.h, c.out2.w)))
            .expect("input gradient requested");
        relu_backward(&c.out2.data, &mut d2);
        let mut d1 = self
            .block2
            .backward(&c.cols2, &d2, &mut grad.block2, Some((c.out1.n, c.out1.h, c.out1.w)))
            .expect("input gradient requested");
        relu_backward(&c.out1.data, &mut d1);
        self.stem.backward(&c.cols1, &d1, &mut grad.stem, None);
    }
}

impl Parameters for SmallConvEncoder {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewD<'_, f64>)) {
        self.stem.visit(&join(prefix, "stem"), f);
        self.block2.visit(&join(prefix, "block2"), f);
        self.block3.visit(&join(prefix, "block3"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewMutD<'_, f64>)) {
        self.stem.visit_mut(&join(prefix, "stem"), f);
        self.block2.visit_mut(&join(prefix, "block2"), f);
        self.block3.visit_mut(&join(prefix, "block3"), f);
    }
}
