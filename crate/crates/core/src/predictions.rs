//! Per-view network outputs, as values and as tape variables.

use tco_autodiff::{Tape, Tensor, Var};

use crate::error::Result;
use crate::geometry::{to_world, unproject, ConfidenceMap, DepthMap, Intrinsics, PointMap, Pose};
use crate::splat::CameraVars;

#[derive(Clone, Debug, PartialEq)]
pub struct ViewPrediction {
    pub depth: DepthMap,
    pub confidence: ConfidenceMap,
    pub pose: Pose,
    pub intrinsics: Intrinsics,
}

impl ViewPrediction {
    pub fn world_points(&self) -> Result<PointMap> {
        to_world(&unproject(&self.depth, &self.intrinsics)?, &self.pose)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Predictions {
    pub views: Vec<ViewPrediction>,
}

impl Predictions {
    pub fn len(&self) -> usize {
        self.views.len()
    }

    pub fn is_empty(&self) -> bool {
        self.views.is_empty()
    }

    pub fn poses(&self) -> Vec<Pose> {
        self.views.iter().map(|v| v.pose).collect()
    }
}

#[derive(Clone, Copy, Debug)]
pub struct ViewVars<'t> {
    /// `[H, W]`
    pub depth: Var<'t>,
    /// `[H, W]`
    pub confidence: Var<'t>,
    pub camera: CameraVars<'t>,
}

#[derive(Clone, Debug)]
pub struct PredictionVars<'t> {
    pub views: Vec<ViewVars<'t>>,
}

impl<'t> PredictionVars<'t> {
    /// Put fixed predictions on a tape as constants.
    pub fn constant(tape: &'t Tape, preds: &Predictions) -> Self {
        let views = preds
            .views
            .iter()
            .map(|v| ViewVars {
                depth: tape.constant(v.depth.values().clone()),
                confidence: tape.constant(v.confidence.values().clone()),
                camera: CameraVars::constant(tape, &v.pose, &v.intrinsics),
            })
            .collect();
        Self { views }
    }

    /// Put predictions on a tape as differentiable leaves, in the order
    /// depth, confidence, rotation, translation, focal for each view.
    pub fn leaves(tape: &'t Tape, preds: &Predictions) -> Self {
        let views = preds
            .views
            .iter()
            .map(|v| ViewVars {
                depth: tape.leaf(v.depth.values().clone()),
                confidence: tape.leaf(v.confidence.values().clone()),
                camera: CameraVars {
                    rotation: tape.leaf(v.pose.rotation_tensor()),
                    translation: tape.leaf(v.pose.translation_tensor()),
                    focal: tape.leaf(v.intrinsics.focal_tensor()),
                    width: v.intrinsics.width,
                    height: v.intrinsics.height,
                },
            })
            .collect();
        Self { views }
    }

    pub fn len(&self) -> usize {
        self.views.len()
    }

    pub fn is_empty(&self) -> bool {
        self.views.is_empty()
    }

    pub fn values(&self) -> Result<Predictions> {
        let views = self
            .views
            .iter()
            .map(|v| {
                let cam = &v.camera;
                let rot = cam.rotation.value();
                let trans = cam.translation.value();
                let pose = Pose::from_tensors(&rot, &trans).or_else(|_| {
                    let m = nalgebra::Matrix3::from_row_slice(rot.data());
                    let t = nalgebra::Vector3::from_column_slice(trans.data());
                    Pose::from_nearest_rotation(m, t)
                })?;
                let f = cam.focal.value();
                Ok(ViewPrediction {
                    depth: DepthMap::dense(Tensor::clone(&v.depth.value()))?,
                    confidence: ConfidenceMap::new(Tensor::clone(&v.confidence.value()))?,
                    pose,
                    intrinsics: Intrinsics::new(f.data()[0], f.data()[1], cam.width, cam.height)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Predictions { views })
    }
}
