//! Checkpoint archives: the fitted field, the raw parameters (f32), the
//! optimizer moments and a JSON header, all in one "VXA1" archive.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fit::{FitConfig, FitResult, FittedField};
use crate::geometry::Contraction;
use crate::optim::{OptimizerState, ParamRole, Parameter};
use crate::renderer::{Decoder, SamplePlan};
use crate::tensor_io::{Archive, Tensor};
use crate::voxelgrid::DualOctree;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    role: ParamRole,
    len: usize,
    lr_scale: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Meta {
    version: u32,
    config: FitConfig,
    p_inner: [f64; 3],
    alpha: f64,
    t_near: f64,
    t_far: f64,
    n_uniform: usize,
    n_importance: usize,
    snap_tol: Option<f64>,
    decoder_channels: Option<usize>,
    feature_channels: Option<usize>,
    step: u64,
    params: Vec<ParamEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: FitConfig,
    pub field: FittedField,
    pub params: Vec<Parameter>,
    pub optimizer: OptimizerState,
}

impl From<FitResult> for Checkpoint {
    fn from(r: FitResult) -> Checkpoint {
        Checkpoint {
            config: r.config,
            field: r.field,
            params: r.params,
            optimizer: r.optimizer,
        }
    }
}

fn vector(v: &[f64]) -> Result<Tensor> {
    if v.is_empty() {
        return Tensor::from_f64(vec![1], vec![0.0]);
    }
    Tensor::from_f64(vec![v.len()], v.to_vec())
}

fn vector_f32(v: &[f64]) -> Result<Tensor> {
    Ok(vector(v)?.to_f32())
}

fn read(ar: &Archive, name: &str, len: usize) -> Result<Vec<f64>> {
    let mut v = ar.require(name)?.to_f64_vec();
    if v.len() < len {
        return Err(Error::Format(format!("{name}: {} values, expected {len}", v.len())));
    }
    v.truncate(len);
    Ok(v)
}

impl Checkpoint {
    pub fn to_archive(&self) -> Result<Archive> {
        let f = &self.field;
        let mut ar = Archive::new();
        f.octree.to_archive(&mut ar)?;
        let decoder_channels = match &f.decoder {
            Decoder::Identity => None,
            Decoder::Learnable { channels, weights, bias } => {
                ar.insert("field.decoder.weights", vector(weights)?);
                ar.insert("field.decoder.bias", vector(bias)?);
                Some(*channels)
            }
        };
        if let Some((w, b)) = &f.feature_head {
            ar.insert("field.head.weights", vector(w)?);
            ar.insert("field.head.bias", vector(b)?);
        }
        for (i, p) in self.params.iter().enumerate() {
            ar.insert(format!("param.{i}"), vector_f32(&p.values)?);
            ar.insert(format!("adam.m.{i}"), vector_f32(&self.optimizer.first_moment[i])?);
            ar.insert(format!("adam.v.{i}"), vector_f32(&self.optimizer.second_moment[i])?);
        }
        let meta = Meta {
            version: FORMAT_VERSION,
            config: self.config.clone(),
            p_inner: f.contraction.p_inner.into(),
            alpha: f.contraction.alpha,
            t_near: f.plan.t_near,
            t_far: f.plan.t_far,
            n_uniform: f.plan.n_uniform,
            n_importance: f.plan.n_importance,
            snap_tol: f.plan.snap_tol,
            decoder_channels,
            feature_channels: f.feature_head.as_ref().map(|(_, b)| b.len()),
            step: self.optimizer.step,
            params: self
                .params
                .iter()
                .map(|p| ParamEntry {
                    name: p.name.clone(),
                    role: p.role,
                    len: p.len(),
                    lr_scale: p.lr_scale,
                })
                .collect(),
        };
        let json = serde_json::to_vec(&meta).map_err(|e| Error::Format(format!("checkpoint header: {e}")))?;
        ar.insert("meta", Tensor::from_u8(vec![json.len()], json)?);
        Ok(ar)
    }

    pub fn from_archive(ar: &Archive) -> Result<Checkpoint> {
        let bytes = ar
            .require("meta")?
            .as_u8()
            .ok_or_else(|| Error::Format("checkpoint header must be u8".into()))?;
        let meta: Meta = serde_json::from_slice(bytes).map_err(|e| Error::Format(format!("checkpoint header: {e}")))?;
        if meta.version != FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {}", meta.version)));
        }
        let octree = DualOctree::from_archive(ar)?;
        let decoder = match meta.decoder_channels {
            None => Decoder::Identity,
            Some(c) => Decoder::Learnable {
                channels: c,
                weights: read(ar, "field.decoder.weights", 12 * c * 9)?,
                bias: read(ar, "field.decoder.bias", 12)?,
            },
        };
        let feature_head = match meta.feature_channels {
            None => None,
            Some(fc) => {
                let width = octree.feature_width();
                Some((read(ar, "field.head.weights", width * fc)?, read(ar, "field.head.bias", fc)?))
            }
        };
        let mut params = Vec::with_capacity(meta.params.len());
        let mut optimizer = OptimizerState {
            config: meta.config.adam,
            step: meta.step,
            first_moment: Vec::new(),
            second_moment: Vec::new(),
        };
        for (i, e) in meta.params.iter().enumerate() {
            params.push(Parameter::new(e.name.clone(), e.role, read(ar, &format!("param.{i}"), e.len)?).with_lr_scale(e.lr_scale));
            optimizer.first_moment.push(read(ar, &format!("adam.m.{i}"), e.len)?);
            optimizer.second_moment.push(read(ar, &format!("adam.v.{i}"), e.len)?);
        }
        let plan = SamplePlan::new(meta.t_near, meta.t_far, meta.n_uniform, meta.n_importance).with_snap(meta.snap_tol);
        Ok(Checkpoint {
            config: meta.config,
            field: FittedField {
                octree,
                contraction: Contraction::new(meta.p_inner, meta.alpha)?,
                plan,
                decoder,
                feature_head,
            },
            params,
            optimizer,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_archive()?.save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Checkpoint> {
        Checkpoint::from_archive(&Archive::load(path)?)
    }
}
