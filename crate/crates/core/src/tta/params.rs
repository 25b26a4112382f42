use sha2::{Digest, Sha256};

use crate::detector::{Gradients, ParamRef, ToyDetector};
use crate::error::{Error, Result};

/// The adaptable subset: per-channel scale and shift of every normalization
/// layer, in layer order. Everything else stays frozen.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AdaptableParameterSet {
    handles: Vec<ParamRef>,
}

pub fn select_adaptable_parameters(model: &ToyDetector) -> Result<AdaptableParameterSet> {
    if model.norm_layers() == 0 {
        return Err(Error::NoNormalizationLayers);
    }
    let handles = (0..model.norm_layers()).flat_map(|l| [ParamRef::NormScale(l), ParamRef::NormShift(l)]).collect();
    Ok(AdaptableParameterSet { handles })
}

impl AdaptableParameterSet {
    pub fn handles(&self) -> &[ParamRef] {
        &self.handles
    }

    pub fn contains(&self, p: ParamRef) -> bool {
        self.handles.contains(&p)
    }

    pub fn count(&self, model: &ToyDetector) -> usize {
        self.handles.iter().map(|&p| model.tensor(p).len()).sum()
    }

    /// Current values, flattened in handle order.
    pub fn values(&self, model: &ToyDetector) -> Vec<f64> {
        self.handles.iter().flat_map(|&p| model.tensor(p).iter().copied()).collect()
    }

    pub fn assign(&self, model: &mut ToyDetector, values: &[f64]) {
        let mut offset = 0;
        for &p in &self.handles {
            let dst = model.tensor_mut(p);
            dst.copy_from_slice(&values[offset..offset + dst.len()]);
            offset += dst.len();
        }
        debug_assert_eq!(offset, values.len());
    }

    pub fn gradient(&self, grads: &Gradients) -> Vec<f64> {
        self.handles
            .iter()
            .flat_map(|&p| grads.get(p).expect("affine gradients are always computed").iter().copied())
            .collect()
    }

    /// Every tensor outside the subset, running statistics included.
    pub fn frozen(&self, model: &ToyDetector) -> Vec<ParamRef> {
        model.param_refs().into_iter().filter(|p| !self.contains(*p)).collect()
    }

    /// SHA-256 over the bytes of all frozen tensors.
    pub fn frozen_digest(&self, model: &ToyDetector) -> [u8; 32] {
        let mut hasher = Sha256::new();
        for p in self.frozen(model) {
            hasher.update(p.name().as_bytes());
            for v in model.tensor(p) {
                hasher.update(v.to_le_bytes());
            }
        }
        hasher.finalize().into()
    }
}
