use crate::error::{Error, Result};

/// Large-kernel attention geometry: a `K_lka×K_lka` receptive field
/// decomposed into inception depthwise branches, a dilated depthwise
/// convolution and a pointwise convolution.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LkaConfig {
    /// Emulated large kernel size `K_lka`.
    pub kernel: usize,
    pub dilation: usize,
    /// Odd kernel sizes of the parallel depthwise branches.
    pub inception: Vec<usize>,
}

impl Default for LkaConfig {
    fn default() -> Self {
        Self { kernel: 21, dilation: 3, inception: vec![3, 5] }
    }
}

impl LkaConfig {
    /// Local depthwise kernel `2d − 1`.
    pub fn dw_kernel(&self) -> usize {
        2 * self.dilation - 1
    }

    /// Dilated depthwise kernel `⌈K_lka / d⌉`.
    pub fn dwd_kernel(&self) -> usize {
        self.kernel.div_ceil(self.dilation)
    }

    /// Extent covered by the dilated kernel, `d·(dwd − 1) + 1`.
    pub fn receptive_span(&self) -> usize {
        self.dilation * (self.dwd_kernel() - 1) + 1
    }

    pub fn validate(&self) -> Result<()> {
        if self.dilation == 0 || self.kernel == 0 {
            return Err(Error::Config("lka kernel and dilation must be positive".into()));
        }
        let odd = |k: usize| k >= 1 && k % 2 == 1;
        if !odd(self.dw_kernel()) || !odd(self.dwd_kernel()) {
            return Err(Error::Config(format!(
                "derived kernels must be odd: dw {} dwd {}",
                self.dw_kernel(),
                self.dwd_kernel()
            )));
        }
        if let Some(bad) = self.inception.iter().find(|&&r| !odd(r)) {
            return Err(Error::Config(format!("inception kernel {bad} must be odd")));
        }
        Ok(())
    }
}

/// Encoder and head hyperparameters.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    pub in_channels: usize,
    /// Feature width `C`.
    pub channels: usize,
    /// Number of stacked attention blocks `N`.
    pub blocks: usize,
    /// Cluster count `K` of both heads.
    pub clusters: usize,
    pub lka: LkaConfig,
    pub deform_kernel: usize,
    /// Standardize each head logit map over the image before the softmax.
    pub head_norm: bool,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { in_channels: 3, channels: 64, blocks: 2, clusters: 100, lka: LkaConfig::default(), deform_kernel: 3, head_norm: true, seed: 0 }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if !matches!(self.in_channels, 1 | 3) {
            return Err(Error::Config(format!("in_channels must be 1 or 3, got {}", self.in_channels)));
        }
        if self.clusters < 2 {
            return Err(Error::Config("need at least two clusters".into()));
        }
        if self.blocks < 1 {
            return Err(Error::Config("need at least one attention block".into()));
        }
        if self.channels < 8 {
            return Err(Error::Config("feature width must be at least 8".into()));
        }
        if self.deform_kernel == 0 || self.deform_kernel.is_multiple_of(2) {
            return Err(Error::Config("deformable kernel must be odd".into()));
        }
        self.lka.validate()
    }

    /// Smallest accepted image side.
    pub fn min_input_extent(&self) -> usize {
        self.lka.receptive_span()
    }
}

/// Weights (biases excluded) of one attention path: inception depthwise
/// filters, the dilated depthwise filter and the pointwise mixer.
pub fn attention_param_count(channels: usize, lka: &LkaConfig) -> usize {
    let inception: usize = lka.inception.iter().map(|r| channels * r * r).sum();
    let dilated = channels * lka.dwd_kernel() * lka.dwd_kernel();
    inception + dilated + channels * channels
}

/// Weights of a dense `k×k` convolution from `channels` to `channels`.
pub fn dense_param_count(channels: usize, kernel: usize) -> usize {
    channels * channels * kernel * kernel
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_decomposition() {
        let lka = LkaConfig::default();
        assert_eq!((lka.dw_kernel(), lka.dwd_kernel()), (5, 7));
        assert_eq!(lka.receptive_span(), 19);
        assert_eq!(attention_param_count(64, &lka), 9408);
        assert_eq!(dense_param_count(64, 21), 1_806_336);
    }

    #[test]
    fn attention_cost_grows_with_kernel_areas_not_lka_squared() {
        let c = 64;
        for (k, d) in [(21, 3), (35, 5), (49, 7)] {
            let lka = LkaConfig { kernel: k, dilation: d, inception: vec![3, 2 * d - 1] };
            let areas = 9 + (2 * d - 1).pow(2) + lka.dwd_kernel().pow(2);
            assert_eq!(attention_param_count(c, &lka), c * areas + c * c);
            assert!(attention_param_count(c, &lka) * 100 < dense_param_count(c, k));
        }
    }

    #[test]
    fn validation() {
        assert!(ModelConfig::default().validate().is_ok());
        let bad = ModelConfig { clusters: 1, ..ModelConfig::default() };
        assert!(bad.validate().is_err());
        let narrow = ModelConfig { channels: 4, ..ModelConfig::default() };
        assert!(narrow.validate().is_err());
        let even = LkaConfig { kernel: 20, dilation: 2, inception: vec![3] };
        assert!(even.validate().is_err());
    }
}
