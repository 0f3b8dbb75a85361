/// A collection of named, flat parameter blocks.
///
/// Gradients are stored in a value of the same type as the parameters, so
/// optimizers and gradient checks can walk both in lockstep. Block order
/// must be stable for a given shape.
pub trait Parameters {
    fn blocks(&self) -> Vec<(String, &[f64])>;

    fn blocks_mut(&mut self) -> Vec<(String, &mut [f64])>;

    fn num_params(&self) -> usize {
        self.blocks().iter().map(|(_, b)| b.len()).sum()
    }

    fn zero(&mut self) {
        for (_, block) in self.blocks_mut() {
            block.fill(0.0);
        }
    }

    fn zeros_like(&self) -> Self
    where
        Self: Clone + Sized,
    {
        let mut z = self.clone();
        z.zero();
        z
    }

    /// Flattened copy of every parameter in block order.
    fn flatten(&self) -> Vec<f64> {
        self.blocks()
            .into_iter()
            .flat_map(|(_, b)| b.iter().copied())
            .collect()
    }
}

/// Prefixes every block name from `inner` with `prefix.`.
pub(crate) fn prefixed<'a, T: 'a>(
    prefix: &str,
    inner: Vec<(String, T)>,
) -> impl Iterator<Item = (String, T)> + 'a {
    let prefix = prefix.to_string();
    inner
        .into_iter()
        .map(move |(name, b)| (format!("{prefix}.{name}"), b))
}

impl Parameters for Vec<f64> {
    fn blocks(&self) -> Vec<(String, &[f64])> {
        vec![("values".to_string(), self.as_slice())]
    }

    fn blocks_mut(&mut self) -> Vec<(String, &mut [f64])> {
        vec![("values".to_string(), self.as_mut_slice())]
    }
}

impl Parameters for super::Tensor2 {
    fn blocks(&self) -> Vec<(String, &[f64])> {
        vec![("values".to_string(), self.data())]
    }

    fn blocks_mut(&mut self) -> Vec<(String, &mut [f64])> {
        vec![("values".to_string(), self.data_mut())]
    }
}
