use ndarray::{Array1, Array2};

use super::encoder::{encoder_backward, encoder_forward_cached, EncoderCache};
use super::heads::{
    pair_features, pair_features_backward, pair_logits, pair_logits_backward, PairFeatures,
    PairTarget,
};
use super::{ModelConfig, ModelError, ModelParams};
use crate::blend::{blend_backward, blend_relations, BlendMask};
use crate::objectives::{
    pretrain_loss, task_loss, FinetuneTask, LossReport, ObjectiveError, PretrainLossGrads,
    PretrainOutputs, PretrainTargets,
};
use crate::relations::{
    edge_path_backward, gaussian_distance_backward, spd_backward, RelationSet, Topology,
};
use crate::scalar::Scalar;

/// Row `i` is `embedding[atom_types[i]]`.
pub fn embed_atoms<T: Scalar>(
    atom_types: &[usize],
    params: &ModelParams<T>,
) -> Result<Array2<T>, ModelError> {
    let rows = params.embedding.nrows();
    let mut x = Array2::zeros((atom_types.len(), params.embedding.ncols()));
    for (i, &code) in atom_types.iter().enumerate() {
        if code >= rows {
            return Err(ModelError::AtomCode { code, rows });
        }
        x.row_mut(i).assign(&params.embedding.row(code));
    }
    Ok(x)
}

fn scatter_embedding<T: Scalar>(atom_types: &[usize], dx: &Array2<T>, grads: &mut ModelParams<T>) {
    for (i, &code) in atom_types.iter().enumerate() {
        let mut row = grads.embedding.row_mut(code);
        row += &dx.row(i);
    }
}

/// One pretraining example: the molecule's structure, the (noised) distances that feed
/// the 3D encoding, this step's blend mask, and the clean targets.
#[derive(Debug, Clone)]
pub struct PretrainSample<T> {
    pub topology: Topology,
    pub dist: Option<Array2<T>>,
    pub mask: BlendMask,
    pub targets: PretrainTargets<T>,
}

/// Input pathway of the finetuning objectives.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum FinetuneMode {
    /// Bias `Psi_spd + Psi_edge`.
    #[serde(rename = "2d")]
    TwoD,
    /// Bias `Psi_spd + Psi_edge + Psi_distance`.
    #[serde(rename = "2d3d")]
    TwoDThreeD,
}

#[derive(Debug, Clone)]
pub struct FinetuneSample<T> {
    pub topology: Topology,
    pub dist: Option<Array2<T>>,
    pub label: T,
}

/// Finetuning attention bias. With `zero_distance` the distance term is replaced by zeros
/// and carries no gradient.
pub fn finetune_bias<T: Scalar>(
    rels: &RelationSet<T>,
    mode: FinetuneMode,
    zero_distance: bool,
) -> Result<Array2<T>, ModelError> {
    let bias = &rels.spd_enc + &rels.edge_enc;
    match mode {
        FinetuneMode::TwoD => Ok(bias),
        FinetuneMode::TwoDThreeD => {
            let dist = rels
                .dist_enc
                .as_ref()
                .ok_or(ObjectiveError::MissingCoordinates)?;
            if zero_distance {
                Ok(bias)
            } else {
                Ok(bias + dist)
            }
        }
    }
}

struct PretrainTape<T> {
    sample: PretrainSample<T>,
    x: Array2<T>,
    cache: EncoderCache<T>,
    features: PairFeatures<T>,
    grads: PretrainLossGrads<T>,
}

struct FinetuneTape<T> {
    topology: Topology,
    dist: Option<Array2<T>>,
    use_dist: bool,
    pooled: Array1<T>,
    cache: EncoderCache<T>,
    d_pred: T,
}

enum Tape<T> {
    Pretrain(Box<PretrainTape<T>>),
    Finetune(Box<FinetuneTape<T>>),
}

/// Forward/backward over one molecule against read-only parameters.
///
/// `forward_*` records the intermediates; `backward` turns the recorded loss into
/// gradients for every registered tensor.
pub struct ModelSession<'p, T> {
    params: &'p ModelParams<T>,
    config: &'p ModelConfig,
    tape: Option<Tape<T>>,
}

impl<'p, T: Scalar> ModelSession<'p, T> {
    pub fn new(params: &'p ModelParams<T>, config: &'p ModelConfig) -> Self {
        Self {
            params,
            config,
            tape: None,
        }
    }

    /// Blend, encode, predict every relation and the noise, and score against the targets.
    pub fn forward_pretrain(
        &mut self,
        sample: &PretrainSample<T>,
    ) -> Result<(LossReport, PretrainOutputs<T>), ModelError> {
        self.tape = None;
        let params = self.params;
        let rels = RelationSet::compute(&sample.topology, sample.dist.clone(), &params.relations)?;
        let blended = blend_relations(&rels, &sample.mask)?;
        let x0 = embed_atoms(&sample.topology.atom_types, params)?;
        let (x, cache) = encoder_forward_cached(&x0, &blended.values, params, self.config)?;
        let features = pair_features(&x, &params.head);
        let outputs = PretrainOutputs {
            spd_logits: pair_logits(&features, &params.head.spd),
            edge_logits: pair_logits(&features, &params.head.edge),
            dist_pred: pair_logits(&features, &params.head.dist),
            noise_pred: x.dot(&params.noise),
        };
        let (report, grads) = pretrain_loss(
            &outputs,
            &sample.targets,
            &self.config.loss_weights,
            self.config.loss_positions,
            &sample.mask,
        )?;
        self.tape = Some(Tape::Pretrain(Box::new(PretrainTape {
            sample: sample.clone(),
            x,
            cache,
            features,
            grads,
        })));
        Ok((report, outputs))
    }

    /// Graph-level prediction and its task loss.
    pub fn forward_finetune(
        &mut self,
        sample: &FinetuneSample<T>,
        mode: FinetuneMode,
        task: FinetuneTask,
        zero_distance: bool,
    ) -> Result<(T, T), ModelError> {
        self.tape = None;
        let params = self.params;
        let dist = match mode {
            FinetuneMode::TwoD => None,
            FinetuneMode::TwoDThreeD => Some(
                sample
                    .dist
                    .clone()
                    .ok_or(ObjectiveError::MissingCoordinates)?,
            ),
        };
        let rels = RelationSet::compute(&sample.topology, dist.clone(), &params.relations)?;
        let bias = finetune_bias(&rels, mode, zero_distance)?;
        let x0 = embed_atoms(&sample.topology.atom_types, params)?;
        let (x, cache) = encoder_forward_cached(&x0, &bias, params, self.config)?;
        let pooled = super::readout(&x);
        let pred = pooled.dot(&params.readout_weight) + params.readout_bias[0];
        let (loss, d_pred) = task_loss(pred, sample.label, task);
        self.tape = Some(Tape::Finetune(Box::new(FinetuneTape {
            topology: sample.topology.clone(),
            use_dist: dist.is_some() && !zero_distance,
            dist,
            pooled,
            cache,
            d_pred,
        })));
        Ok((pred, loss))
    }

    /// Gradients of the last recorded loss with respect to every parameter tensor.
    pub fn backward(&self) -> Result<ModelParams<T>, ModelError> {
        let mut grads = self.params.zeros_like();
        match self
            .tape
            .as_ref()
            .ok_or(ModelError::BackwardBeforeForward)?
        {
            Tape::Pretrain(tape) => self.backward_pretrain(tape, &mut grads),
            Tape::Finetune(tape) => self.backward_finetune(tape, &mut grads),
        }
        Ok(grads)
    }

    fn backward_pretrain(&self, tape: &PretrainTape<T>, grads: &mut ModelParams<T>) {
        let params = self.params;
        let head = &params.head;
        let (n, m) = tape.features.left.out.dim();
        let mut d_left = Array2::zeros((n, m));
        let mut d_right = Array2::zeros((n, m));
        for (target, dz) in [
            (PairTarget::Spd, &tape.grads.spd),
            (PairTarget::Edge, &tape.grads.edge),
            (PairTarget::Dist, &tape.grads.dist),
        ] {
            pair_logits_backward(
                &tape.features,
                target.weights(head),
                dz,
                target.weights_mut(&mut grads.head),
                &mut d_left,
                &mut d_right,
            );
        }
        let mut dx = pair_features_backward(
            &tape.x,
            &tape.features,
            head,
            &d_left,
            &d_right,
            &mut grads.head,
        );
        grads.noise += &tape.x.t().dot(&tape.grads.noise);
        dx += &tape.grads.noise.dot(&params.noise.t());

        let (dx0, d_bias) = encoder_backward(dx, &tape.cache, params, grads, self.config);
        let sample = &tape.sample;
        scatter_embedding(&sample.topology.atom_types, &dx0, grads);
        let [d_spd, d_edge, d_dist] = blend_backward(&sample.mask, &d_bias);
        self.relation_backward(
            &sample.topology,
            sample.dist.as_ref(),
            &d_spd,
            &d_edge,
            Some(&d_dist),
            grads,
        );
    }

    fn backward_finetune(&self, tape: &FinetuneTape<T>, grads: &mut ModelParams<T>) {
        let params = self.params;
        let g = tape.d_pred;
        grads.readout_weight.scaled_add(g, &tape.pooled);
        grads.readout_bias[0] += g;
        let n = tape.topology.atom_count();
        let row = &params.readout_weight * (g / T::lit(n as f64));
        let dx = Array2::from_shape_fn((n, row.len()), |(_, c)| row[c]);
        let (dx0, d_bias) = encoder_backward(dx, &tape.cache, params, grads, self.config);
        scatter_embedding(&tape.topology.atom_types, &dx0, grads);
        let d_dist = tape.use_dist.then_some(&d_bias);
        self.relation_backward(
            &tape.topology,
            tape.dist.as_ref(),
            &d_bias,
            &d_bias,
            d_dist,
            grads,
        );
    }

    fn relation_backward(
        &self,
        topology: &Topology,
        dist: Option<&Array2<T>>,
        d_spd: &Array2<T>,
        d_edge: &Array2<T>,
        d_dist: Option<&Array2<T>>,
        grads: &mut ModelParams<T>,
    ) {
        let rel = &self.params.relations;
        spd_backward(&topology.spd, d_spd, &mut grads.relations.spd_table);
        edge_path_backward(
            &topology.paths,
            &rel.edge,
            d_edge,
            &mut grads.relations.edge,
        );
        if let (Some(dist), Some(d_dist)) = (dist, d_dist) {
            gaussian_distance_backward(
                dist,
                &topology.atom_types,
                &rel.gaussian,
                d_dist,
                &mut grads.relations.gaussian,
            );
        }
    }
}
