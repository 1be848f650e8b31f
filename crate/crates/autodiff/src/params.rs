use crate::error::AutodiffError;
use crate::tensor::Tensor;

/// Handle to one tensor inside a [`ModelParams`] collection.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

/// Exponential moving average of a parameter set.
#[derive(Clone, Debug)]
pub struct EmaShadow {
    decay: f64,
    tensors: Vec<Tensor>,
}

impl EmaShadow {
    pub fn decay(&self) -> f64 {
        self.decay
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }
}

/// Named, ordered parameter tensors plus an optional EMA shadow.
#[derive(Clone, Debug, Default)]
pub struct ModelParams {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    ema: Option<EmaShadow>,
}

impl ModelParams {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a trainable tensor. Names must be unique.
    pub fn add(&mut self, name: impl Into<String>, shape: &[usize], data: Vec<f64>) -> ParamId {
        let name = name.into();
        assert!(
            !self.names.contains(&name),
            "duplicate parameter name `{}`",
            name
        );
        self.names.push(name);
        self.tensors.push(Tensor::param(shape, data));
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn index_of(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Replaces the value of parameter `id` with a fresh leaf.
    pub fn set(&mut self, id: ParamId, data: Vec<f64>) {
        let shape = self.tensors[id.0].shape().to_vec();
        self.tensors[id.0] = Tensor::param(&shape, data);
    }

    /// Overwrites every value from another collection with the same layout.
    pub fn load_values(&mut self, values: &[Vec<f64>]) -> Result<(), AutodiffError> {
        if values.len() != self.tensors.len() {
            return Err(AutodiffError::Checkpoint(format!(
                "expected {} tensors, got {}",
                self.tensors.len(),
                values.len()
            )));
        }
        for (i, v) in values.iter().enumerate() {
            if v.len() != self.tensors[i].numel() {
                return Err(AutodiffError::Checkpoint(format!(
                    "tensor `{}` expects {} values, got {}",
                    self.names[i],
                    self.tensors[i].numel(),
                    v.len()
                )));
            }
            self.set(ParamId(i), v.clone());
        }
        Ok(())
    }

    pub fn values(&self) -> Vec<Vec<f64>> {
        self.tensors.iter().map(|t| t.data().to_vec()).collect()
    }

    /// Starts an EMA shadow equal to the current live values.
    pub fn init_ema(&mut self, decay: f64) -> Result<(), AutodiffError> {
        if !(0.0..1.0).contains(&decay) {
            return Err(AutodiffError::InvalidHyperparameter(format!(
                "EMA decay must lie in [0, 1), got {decay}"
            )));
        }
        self.ema = Some(EmaShadow {
            decay,
            tensors: self.tensors.iter().map(Tensor::detach).collect(),
        });
        Ok(())
    }

    pub fn ema(&self) -> Option<&EmaShadow> {
        self.ema.as_ref()
    }

    /// `shadow <- decay * shadow + (1 - decay) * live`, elementwise.
    pub fn ema_update(&mut self) {
        if let Some(d) = self.ema.as_ref().map(|e| e.decay) {
            self.ema_update_with(d);
        }
    }

    /// Same update at an explicit decay, e.g. during a warmup that ramps
    /// towards the configured one. The stored decay is unchanged.
    pub fn ema_update_with(&mut self, d: f64) {
        let Some(ema) = self.ema.as_mut() else {
            return;
        };
        for (s, live) in ema.tensors.iter_mut().zip(&self.tensors) {
            let data: Vec<f64> = s
                .data()
                .iter()
                .zip(live.data())
                .map(|(&sv, &lv)| d * sv + (1.0 - d) * lv)
                .collect();
            *s = Tensor::from_vec(live.shape(), data);
        }
    }

    pub fn set_ema_values(&mut self, decay: f64, values: &[Vec<f64>]) -> Result<(), AutodiffError> {
        self.init_ema(decay)?;
        let ema = self.ema.as_mut().expect("just initialised");
        if values.len() != ema.tensors.len() {
            return Err(AutodiffError::Checkpoint("EMA tensor count mismatch".into()));
        }
        for (s, v) in ema.tensors.iter_mut().zip(values) {
            if v.len() != s.numel() {
                return Err(AutodiffError::Checkpoint("EMA tensor size mismatch".into()));
            }
            *s = Tensor::from_vec(&s.shape().to_vec(), v.clone());
        }
        Ok(())
    }

    /// Constant copy of the EMA weights laid out like the live ones, for
    /// evaluation.
    pub fn ema_snapshot(&self) -> Option<Vec<Tensor>> {
        self.ema.as_ref().map(|e| e.tensors.clone())
    }
}
