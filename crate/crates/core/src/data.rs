//! Synthetic datasets: random phantoms, their few-view sinograms and the
//! derived inputs of the learned stage.

use serde::{Deserialize, Serialize};

use crate::analytic::{prepare_inputs, PipelineProducts};
use crate::error::{Error, Result};
use crate::image::{equispaced_angles, Image, Sinogram};
use crate::phantom::{make_phantom, PhantomSpec};
use crate::projector::radon;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    /// Phantom seed of item `index`. Splits occupy disjoint blocks of
    /// `SPLIT_STRIDE` seeds above `base`.
    pub fn seed(self, base: u64, index: usize) -> u64 {
        let block = match self {
            Split::Train => 0,
            Split::Val => 1,
            Split::Test => 2,
        };
        base.wrapping_mul(4 * SPLIT_STRIDE) + block * SPLIT_STRIDE + index as u64
    }

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

/// Largest split size; keeps the seed blocks disjoint.
pub const SPLIT_STRIDE: u64 = 1 << 32;

/// Acquisition geometry shared by every sample of a dataset.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Geometry {
    pub n: usize,
    pub n_det: usize,
    pub nv_few: usize,
    pub nv_dense: usize,
}

impl Geometry {
    pub fn new(n: usize, nv_few: usize) -> Self {
        Geometry {
            n,
            n_det: n,
            nv_few,
            nv_dense: 2 * nv_few,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n < Image::MIN_SIZE || self.n_det == 0 || self.nv_few == 0 || self.nv_dense == 0 {
            return Err(Error::Config(format!("invalid geometry {self:?}")));
        }
        Ok(())
    }
}

/// One phantom with everything the networks and baselines consume.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub seed: u64,
    pub target: Image,
    pub fewview: Sinogram,
    pub products: PipelineProducts,
}

impl Sample {
    /// Phantom from `seed`, projected at `geom.nv_few` views.
    pub fn simulate(seed: u64, geom: &Geometry) -> Result<Self> {
        let target = make_phantom(&PhantomSpec::random(seed), geom.n)?;
        let fewview = radon(&target, &equispaced_angles(geom.nv_few), geom.n_det)?;
        Self::from_parts(seed, target, fewview, geom)
    }

    /// Derives the learned-stage inputs from a stored phantom and sinogram.
    pub fn from_parts(
        seed: u64,
        target: Image,
        fewview: Sinogram,
        geom: &Geometry,
    ) -> Result<Self> {
        if target.n() != geom.n || fewview.n_views() != geom.nv_few || fewview.n_det() != geom.n_det
        {
            return Err(Error::shape(
                "sample",
                format!(
                    "phantom {} / sinogram {}x{} do not match geometry {geom:?}",
                    target.n(),
                    fewview.n_views(),
                    fewview.n_det()
                ),
            ));
        }
        let products = prepare_inputs(&fewview, geom.n, Some(geom.nv_dense))?;
        Ok(Sample {
            seed,
            target,
            fewview,
            products,
        })
    }

    pub fn fbp(&self) -> &Image {
        &self.products.fbp_image
    }

    pub fn filtered(&self) -> &Sinogram {
        &self.products.filtered_dense_sino
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    geometry: Geometry,
    samples: Vec<Sample>,
}

impl Dataset {
    pub fn new(geometry: Geometry, samples: Vec<Sample>) -> Result<Self> {
        geometry.validate()?;
        for s in &samples {
            if s.target.n() != geometry.n
                || s.fewview.n_views() != geometry.nv_few
                || s.filtered().n_views() != geometry.nv_dense
            {
                return Err(Error::shape(
                    "dataset",
                    format!("sample {} does not match {geometry:?}", s.seed),
                ));
            }
        }
        Ok(Dataset { geometry, samples })
    }

    /// `count` phantoms of `split`, seeded from `base`.
    pub fn simulate(geometry: Geometry, split: Split, base: u64, count: usize) -> Result<Self> {
        geometry.validate()?;
        let samples = (0..count)
            .map(|i| Sample::simulate(split.seed(base, i), &geometry))
            .collect::<Result<Vec<_>>>()?;
        Ok(Dataset { geometry, samples })
    }

    /// Same phantoms re-acquired under another geometry.
    pub fn reacquire(&self, geometry: Geometry) -> Result<Self> {
        geometry.validate()?;
        let samples = self
            .samples
            .iter()
            .map(|s| {
                let target = if geometry.n == self.geometry.n {
                    s.target.clone()
                } else {
                    make_phantom(&PhantomSpec::random(s.seed), geometry.n)?
                };
                let fewview = radon(&target, &equispaced_angles(geometry.nv_few), geometry.n_det)?;
                Sample::from_parts(s.seed, target, fewview, &geometry)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Dataset { geometry, samples })
    }

    pub fn geometry(&self) -> &Geometry {
        &self.geometry
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Flattened batch tensors for the samples at `indices`.
    pub fn batch(&self, indices: &[usize]) -> Batch {
        let mut b = Batch {
            size: indices.len(),
            ..Batch::default()
        };
        for &i in indices {
            let s = &self.samples[i];
            b.filtered.extend_from_slice(s.filtered().data());
            b.fbp.extend_from_slice(s.fbp().data());
            b.target.extend_from_slice(s.target.data());
        }
        b
    }

    /// Angles of the dense filtered sinograms.
    pub fn dense_angles(&self) -> Vec<f64> {
        equispaced_angles(self.geometry.nv_dense)
    }
}

/// Concatenated per-sample arrays of one mini-batch.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Batch {
    pub size: usize,
    pub filtered: Vec<f32>,
    pub fbp: Vec<f32>,
    pub target: Vec<f32>,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_seeds_are_disjoint() {
        for base in [0u64, 1, 7] {
            let last_train = Split::Train.seed(base, 1999);
            let first_val = Split::Val.seed(base, 0);
            let last_val = Split::Val.seed(base, 199);
            let first_test = Split::Test.seed(base, 0);
            assert!(last_train < first_val && last_val < first_test);
        }
        assert!(Split::Test.seed(0, 199) < Split::Train.seed(1, 0));
    }

    #[test]
    fn simulation_is_deterministic_and_shaped() {
        let geom = Geometry::new(32, 6);
        let a = Dataset::simulate(geom, Split::Val, 0, 2).unwrap();
        let b = Dataset::simulate(geom, Split::Val, 0, 2).unwrap();
        assert_eq!(a, b);
        let s = &a.samples()[0];
        assert_eq!(s.fewview.n_views(), 6);
        assert_eq!(s.filtered().n_views(), 12);
        let batch = a.batch(&[1, 0]);
        assert_eq!(batch.filtered.len(), 2 * 12 * 32);
        assert_eq!(&batch.target[..32 * 32], a.samples()[1].target.data());
    }

    #[test]
    fn reacquire_keeps_phantoms() {
        let a = Dataset::simulate(Geometry::new(32, 6), Split::Test, 0, 2).unwrap();
        let b = a.reacquire(Geometry::new(32, 4)).unwrap();
        assert_eq!(a.samples()[1].target, b.samples()[1].target);
        assert_eq!(b.samples()[1].filtered().n_views(), 8);
    }
}
