//! Learnable parameter groups and the uniform view over them used by the
//! optimizer, the gradient checker and checkpoints.

use crate::linalg::Matrix;

/// A named collection of tensors. Vectors are stored as `n x 1` matrices.
pub trait ParamGroup {
    const GROUP: &'static str;

    fn tensors(&self) -> Vec<(&'static str, &Matrix)>;
    fn tensors_mut(&mut self) -> Vec<(&'static str, &mut Matrix)>;

    fn zeros_like(&self) -> Self
    where
        Self: Clone,
    {
        let mut z = self.clone();
        for (_, t) in z.tensors_mut() {
            t.fill(0.0);
        }
        z
    }

    fn num_params(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    fn is_finite(&self) -> bool {
        self.tensors().iter().all(|(_, t)| t.is_finite())
    }
}

macro_rules! param_group {
    ($ty:ident, $group:literal, [$($field:ident),+ $(,)?]) => {
        impl $crate::params::ParamGroup for $ty {
            const GROUP: &'static str = $group;

            fn tensors(&self) -> Vec<(&'static str, &$crate::linalg::Matrix)> {
                vec![$((stringify!($field), &self.$field)),+]
            }

            fn tensors_mut(&mut self) -> Vec<(&'static str, &mut $crate::linalg::Matrix)> {
                let $ty { $($field),+ } = self;
                vec![$((stringify!($field), $field)),+]
            }
        }
    };
}
pub(crate) use param_group;

pub fn column(values: Vec<f64>) -> Matrix {
    Matrix {
        rows: values.len(),
        cols: 1,
        data: values,
    }
}
