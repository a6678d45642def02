//! First-stage autoencoders `T(.)` producing unit-normalised semantic codes.

use nalgebra::DMatrix;
use ndarray::{Array1, Array2, Array3, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::shapes::Image;

/// Shape of the latent the LDM-8 KL autoencoder would produce.
pub const LDM8_Z_SHAPE: (usize, usize, usize) = (32, 32, 4);
pub const LDM8_CHANNELS: usize = 320;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FirstStageAE {
    /// Pixel space: encode is flattening.
    Identity { shape: (usize, usize, usize) },
    /// Linear autoencoder from principal components of training images.
    Pca {
        shape: (usize, usize, usize),
        mean: Vec<f64>,
        /// Row-major `[k, C*H*W]`, orthonormal rows.
        components: Vec<f64>,
        k: usize,
    },
    /// Placeholder for the pretrained latent autoencoder; weights are not shipped.
    Ldm8Adapter { weights: Option<std::path::PathBuf> },
}

impl FirstStageAE {
    pub fn identity(shape: (usize, usize, usize)) -> Self {
        Self::Identity { shape }
    }

    /// Fits `k` principal components on `images` via the Gram matrix.
    pub fn fit_pca(images: &[Image], k: usize) -> Result<Self> {
        let first = images.first().ok_or(Error::DatasetEmpty)?;
        let shape = first.dim();
        let d = first.len();
        let n = images.len();
        if k == 0 || k > n {
            return Err(Error::InvalidValue(format!("pca needs 1 <= k <= {n}, got {k}")));
        }
        let mut x = Array2::<f64>::zeros((n, d));
        for (i, img) in images.iter().enumerate() {
            if img.dim() != shape {
                return Err(Error::Shape("pca images differ in shape".into()));
            }
            x.row_mut(i).assign(&Array1::from_iter(img.iter().copied()));
        }
        let mean = x.mean_axis(Axis(0)).expect("n > 0");
        x -= &mean;
        let gram = x.dot(&x.t());
        let eig = nalgebra::SymmetricEigen::new(DMatrix::from_fn(n, n, |i, j| gram[[i, j]]));
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
        let mut components = Vec::with_capacity(k * d);
        for &idx in order.iter().take(k) {
            let lambda = eig.eigenvalues[idx];
            if lambda <= 1e-12 {
                return Err(Error::InvalidValue(format!(
                    "only {} informative components available",
                    components.len() / d
                )));
            }
            let u = Array1::from_iter(eig.eigenvectors.column(idx).iter().copied());
            let v = x.t().dot(&u) / lambda.sqrt();
            components.extend(v.iter());
        }
        Ok(Self::Pca {
            shape,
            mean: mean.to_vec(),
            components,
            k,
        })
    }

    pub fn input_shape(&self) -> Result<(usize, usize, usize)> {
        match self {
            Self::Identity { shape } | Self::Pca { shape, .. } => Ok(*shape),
            Self::Ldm8Adapter { .. } => Err(unavailable()),
        }
    }

    fn check(&self, x: &Image) -> Result<()> {
        let shape = self.input_shape()?;
        if x.dim() != shape {
            return Err(Error::Shape(format!("autoencoder expects {shape:?}, got {:?}", x.dim())));
        }
        Ok(())
    }

    fn pca_parts(&self) -> Option<(&[f64], Array2<f64>)> {
        match self {
            Self::Pca { mean, components, k, .. } => Some((
                mean,
                Array2::from_shape_vec((*k, mean.len()), components.clone()).expect("stored shape"),
            )),
            _ => None,
        }
    }

    /// Raw latent code.
    pub fn encode(&self, x: &Image) -> Result<Array1<f64>> {
        self.check(x)?;
        let flat = Array1::from_iter(x.iter().copied());
        match self.pca_parts() {
            Some((mean, w)) => Ok(w.dot(&(flat - &Array1::from(mean.to_vec())))),
            None => Ok(flat),
        }
    }

    pub fn decode(&self, z: &Array1<f64>) -> Result<Image> {
        let shape = self.input_shape()?;
        let flat = match self.pca_parts() {
            Some((mean, w)) => {
                if z.len() != w.nrows() {
                    return Err(Error::LengthMismatch(z.len(), w.nrows()));
                }
                w.t().dot(z) + &Array1::from(mean.to_vec())
            }
            None => z.clone(),
        };
        Array3::from_shape_vec(shape, flat.to_vec()).map_err(|e| Error::Shape(e.to_string()))
    }

    /// Gradient of `<code(x), target>` with respect to `x`, with the score.
    pub fn code_vjp(&self, x: &Image, target: &Array1<f64>) -> Result<(f64, Image)> {
        let z = self.encode(x)?;
        if z.len() != target.len() {
            return Err(Error::LengthMismatch(z.len(), target.len()));
        }
        let norm = z.dot(&z).sqrt();
        if norm == 0.0 {
            return Err(Error::InvalidValue("autoencoder code has zero norm".into()));
        }
        let u = &z / norm;
        let score = u.dot(target);
        let dz = (target - &(&u * score)) / norm;
        let dx = match self.pca_parts() {
            Some((_, w)) => w.t().dot(&dz),
            None => dz,
        };
        let shape = self.input_shape()?;
        Ok((score, Array3::from_shape_vec(shape, dx.to_vec()).expect("input-sized gradient")))
    }
}

fn unavailable() -> Error {
    Error::EmbedderUnavailable(format!(
        "the LDM-8 autoencoder (z {LDM8_Z_SHAPE:?}, {LDM8_CHANNELS} channels) needs external weights"
    ))
}

/// Flattened, unit-normalised code.
pub fn ae_code(ae: &FirstStageAE, x: &Image) -> Result<Array1<f64>> {
    let z = ae.encode(x)?;
    let norm = z.dot(&z).sqrt();
    if norm == 0.0 {
        return Err(Error::InvalidValue("autoencoder code has zero norm".into()));
    }
    Ok(z / norm)
}
