use super::DlrmError;

/// Shape and optimizer settings for a DLRM instance.
///
/// `bottom_mlp_dims` and `top_mlp_dims` list output widths only; the input
/// width of the first bottom layer is `num_dense` and the input width of the
/// first top layer is `embed_dim + interaction_dim()`.
#[derive(Clone, Debug, PartialEq)]
pub struct DlrmConfig {
    pub num_dense: usize,
    pub num_sparse: usize,
    pub vocab_sizes: Vec<usize>,
    pub embed_dim: usize,
    pub bottom_mlp_dims: Vec<usize>,
    pub top_mlp_dims: Vec<usize>,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for DlrmConfig {
    /// 13 dense features, 26 tables of 1000 rows, d = 16,
    /// bottom 13→64→16, top 367→64→1.
    fn default() -> Self {
        Self {
            num_dense: 13,
            num_sparse: 26,
            vocab_sizes: vec![1000; 26],
            embed_dim: 16,
            bottom_mlp_dims: vec![64, 16],
            top_mlp_dims: vec![64, 1],
            learning_rate: 0.5,
            seed: 0,
        }
    }
}

impl DlrmConfig {
    /// Number of pairwise interaction terms among the dense vector and the
    /// `num_sparse` embeddings, excluding self-terms.
    pub fn interaction_dim(&self) -> usize {
        let n = self.num_sparse + 1;
        n * (n - 1) / 2
    }

    pub fn top_input_dim(&self) -> usize {
        self.embed_dim + self.interaction_dim()
    }

    pub fn validate(&self) -> Result<(), DlrmError> {
        let fail = |msg: String| Err(DlrmError::Config(msg));
        if self.num_dense == 0 {
            return fail("num_dense must be positive".into());
        }
        if self.num_sparse == 0 {
            return fail("num_sparse must be positive".into());
        }
        if self.vocab_sizes.len() != self.num_sparse {
            return fail(format!(
                "{} vocab sizes given for {} sparse features",
                self.vocab_sizes.len(),
                self.num_sparse
            ));
        }
        if let Some(t) = self.vocab_sizes.iter().position(|&v| v == 0) {
            return fail(format!("vocab size of table {t} is zero"));
        }
        if self.vocab_sizes.iter().any(|&v| v > u32::MAX as usize) {
            return fail("vocab size exceeds u32 range".into());
        }
        if self.embed_dim == 0 {
            return fail("embed_dim must be positive".into());
        }
        match self.bottom_mlp_dims.last() {
            None => return fail("bottom MLP needs at least one layer".into()),
            Some(&last) if last != self.embed_dim => {
                return fail(format!(
                    "bottom MLP ends in {last}, expected embed_dim {}",
                    self.embed_dim
                ))
            }
            _ => {}
        }
        match self.top_mlp_dims.last() {
            None => return fail("top MLP needs at least one layer".into()),
            Some(&last) if last != 1 => {
                return fail(format!("top MLP ends in {last}, expected 1"))
            }
            _ => {}
        }
        if self
            .bottom_mlp_dims
            .iter()
            .chain(&self.top_mlp_dims)
            .any(|&w| w == 0)
        {
            return fail("MLP layer width must be positive".into());
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return fail(format!("learning rate {} must be positive", self.learning_rate));
        }
        Ok(())
    }

    /// (fan_in, fan_out) for each bottom MLP layer.
    pub fn bottom_layer_shapes(&self) -> Vec<(usize, usize)> {
        layer_shapes(self.num_dense, &self.bottom_mlp_dims)
    }

    /// (fan_in, fan_out) for each top MLP layer.
    pub fn top_layer_shapes(&self) -> Vec<(usize, usize)> {
        layer_shapes(self.top_input_dim(), &self.top_mlp_dims)
    }
}

fn layer_shapes(input: usize, widths: &[usize]) -> Vec<(usize, usize)> {
    let mut fan_in = input;
    widths
        .iter()
        .map(|&w| {
            let shape = (fan_in, w);
            fan_in = w;
            shape
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_dims() {
        let c = DlrmConfig::default();
        c.validate().unwrap();
        assert_eq!(c.interaction_dim(), 351);
        assert_eq!(c.top_input_dim(), 367);
        assert_eq!(c.bottom_layer_shapes(), vec![(13, 64), (64, 16)]);
        assert_eq!(c.top_layer_shapes(), vec![(367, 64), (64, 1)]);
    }

    #[test]
    fn rejects_bad_shapes() {
        let mut c = DlrmConfig::default();
        c.bottom_mlp_dims = vec![64, 8];
        assert!(matches!(c.validate(), Err(DlrmError::Config(_))));

        let mut c = DlrmConfig::default();
        c.top_mlp_dims = vec![64, 2];
        assert!(c.validate().is_err());

        let mut c = DlrmConfig::default();
        c.vocab_sizes[3] = 0;
        assert!(c.validate().is_err());

        let mut c = DlrmConfig::default();
        c.vocab_sizes.pop();
        assert!(c.validate().is_err());

        let mut c = DlrmConfig::default();
        c.learning_rate = 0.0;
        assert!(c.validate().is_err());
    }
}
