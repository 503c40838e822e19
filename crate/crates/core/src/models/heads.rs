//! Task heads on top of the encoder, and whole-model checkpoints.

use std::fmt;

use super::params::{fan_in_uniform, Binding, ParamStore};
use super::resnet::{Encoder, EncoderPass, EncoderSpec, Mode, LATENT_DIM};
use crate::error::{Error, Result};
use crate::pretext::TaskVariant;
use crate::rng::{self, stream};
use crate::tensor::{Checkpoint, Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum HeadKind {
    /// 64 -> 4, whole-image rotation.
    RotNet4,
    /// 64 -> 8, rotations plus patch rotations.
    PatchRot8,
    /// concat(64, 64) -> 4 over (rotated, patched) pairs.
    RelNet4,
}

impl HeadKind {
    pub fn for_variant(variant: TaskVariant) -> Self {
        match variant {
            TaskVariant::RotNet => HeadKind::RotNet4,
            TaskVariant::PatchRotNet => HeadKind::PatchRot8,
            TaskVariant::PatchRelNet => HeadKind::RelNet4,
        }
    }

    pub fn variant(self) -> TaskVariant {
        match self {
            HeadKind::RotNet4 => TaskVariant::RotNet,
            HeadKind::PatchRot8 => TaskVariant::PatchRotNet,
            HeadKind::RelNet4 => TaskVariant::PatchRelNet,
        }
    }

    pub fn in_features(self) -> usize {
        match self {
            HeadKind::RotNet4 | HeadKind::PatchRot8 => LATENT_DIM,
            HeadKind::RelNet4 => 2 * LATENT_DIM,
        }
    }

    pub fn num_classes(self) -> usize {
        match self {
            HeadKind::RotNet4 | HeadKind::RelNet4 => 4,
            HeadKind::PatchRot8 => 8,
        }
    }

    pub fn is_pairwise(self) -> bool {
        self == HeadKind::RelNet4
    }

    fn name(self) -> &'static str {
        match self {
            HeadKind::RotNet4 => "rotnet4",
            HeadKind::PatchRot8 => "patchrot8",
            HeadKind::RelNet4 => "relnet4",
        }
    }

    fn from_shape(out: usize, inp: usize) -> Option<Self> {
        [HeadKind::RotNet4, HeadKind::PatchRot8, HeadKind::RelNet4]
            .into_iter()
            .find(|k| k.num_classes() == out && k.in_features() == inp)
    }
}

impl fmt::Display for HeadKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Input to a pretext model: one batch, or two equally sized batches.
#[derive(Debug, Clone, Copy)]
pub enum ModelInput {
    Single(Var),
    Pair(Var, Var),
}

/// Tape handles for a whole model.
#[derive(Debug, Clone)]
pub struct ModelBinding {
    pub encoder: Binding,
    pub head: Binding,
}

#[derive(Debug, Clone)]
pub struct ForwardPass {
    pub logits: Var,
    /// One entry per encoded batch (two for pairs, `a` first).
    pub encoder_passes: Vec<EncoderPass>,
}

fn linear_layer(
    params: &mut ParamStore,
    name: &str,
    inp: usize,
    out: usize,
    rng: &mut rng::Rng,
) -> (usize, usize) {
    let w = params.push(
        format!("{name}.weight"),
        fan_in_uniform(vec![out, inp], inp, rng),
        true,
    );
    let b = params.push(format!("{name}.bias"), fan_in_uniform(vec![out], inp, rng), true);
    (w, b)
}

/// Encoder plus a pretext head.
#[derive(Debug, Clone)]
pub struct PretextModel {
    pub encoder: Encoder,
    kind: HeadKind,
    head: ParamStore,
    fc: (usize, usize),
}

impl PretextModel {
    pub fn new(spec: EncoderSpec, kind: HeadKind, seed: u64) -> Result<Self> {
        let encoder = Encoder::new(spec, seed)?;
        let mut rng = rng::substream(seed, &[stream::INIT, 1]);
        let mut head = ParamStore::new();
        let fc = linear_layer(&mut head, "fc", kind.in_features(), kind.num_classes(), &mut rng);
        Ok(Self {
            encoder,
            kind,
            head,
            fc,
        })
    }

    pub fn kind(&self) -> HeadKind {
        self.kind
    }

    pub fn head_params(&self) -> &ParamStore {
        &self.head
    }

    pub fn bind(&self, tape: &mut Tape, requires_grad: bool) -> ModelBinding {
        ModelBinding {
            encoder: self.encoder.bind(tape, requires_grad),
            head: self.head.bind(tape, requires_grad),
        }
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        binding: &ModelBinding,
        input: ModelInput,
        mode: Mode,
    ) -> Result<ForwardPass> {
        let (features, passes) = match (input, self.kind.is_pairwise()) {
            (ModelInput::Single(x), false) => {
                let pass = self.encoder.forward(tape, &binding.encoder, x, mode)?;
                (pass.latent, vec![pass])
            }
            (ModelInput::Pair(a, b), true) => {
                if tape.shape(a)[0] != tape.shape(b)[0] {
                    return Err(Error::shape(
                        "classify_rel",
                        format!("batch sizes {} and {}", tape.shape(a)[0], tape.shape(b)[0]),
                    ));
                }
                let pa = self.encoder.forward(tape, &binding.encoder, a, mode)?;
                let pb = self.encoder.forward(tape, &binding.encoder, b, mode)?;
                let joined = tape.concat(&[pa.latent, pb.latent], 1)?;
                (joined, vec![pa, pb])
            }
            (_, pairwise) => {
                return Err(Error::shape(
                    "pretext head",
                    format!(
                        "{} head expects {} input",
                        self.kind,
                        if pairwise { "a paired" } else { "a single" }
                    ),
                ))
            }
        };
        let logits = tape.linear(
            features,
            binding.head.var(self.fc.0),
            binding.head.var(self.fc.1),
        )?;
        Ok(ForwardPass {
            logits,
            encoder_passes: passes,
        })
    }

    fn infer(&self, input: &[&Tensor]) -> Result<Tensor> {
        let mut tape = Tape::new();
        let binding = self.bind(&mut tape, false);
        let vars: Vec<Var> = input.iter().map(|t| tape.constant((*t).clone())).collect();
        let input = match vars[..] {
            [x] => ModelInput::Single(x),
            [a, b] => ModelInput::Pair(a, b),
            _ => unreachable!("one or two inputs"),
        };
        let pass = self.forward(&mut tape, &binding, input, Mode::Eval)?;
        Ok(tape.value(pass.logits).clone())
    }

    fn expect_kind(&self, kind: HeadKind) -> Result<()> {
        if self.kind != kind {
            return Err(Error::shape(
                "classify",
                format!("model has a {} head, not {kind}", self.kind),
            ));
        }
        Ok(())
    }

    /// N×8 eval-mode logits.
    pub fn classify_patchrot(&self, batch: &Tensor) -> Result<Tensor> {
        self.expect_kind(HeadKind::PatchRot8)?;
        self.infer(&[batch])
    }

    /// N×4 eval-mode logits.
    pub fn classify_rotnet(&self, batch: &Tensor) -> Result<Tensor> {
        self.expect_kind(HeadKind::RotNet4)?;
        self.infer(&[batch])
    }

    /// N×4 eval-mode logits for `concat(encode(a), encode(b))`.
    pub fn classify_rel(&self, batch_a: &Tensor, batch_b: &Tensor) -> Result<Tensor> {
        self.expect_kind(HeadKind::RelNet4)?;
        self.infer(&[batch_a, batch_b])
    }

    pub(crate) fn parts_mut(&mut self) -> (&mut Encoder, &mut ParamStore) {
        (&mut self.encoder, &mut self.head)
    }

    pub fn num_trainable(&self) -> usize {
        self.encoder.params().num_trainable() + self.head.num_trainable()
    }

    pub fn descriptor(&self) -> String {
        format!("pretext;{};head={}", self.encoder.spec().descriptor(), self.kind)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut entries = self.encoder.params().entries("encoder.");
        entries.extend(self.head.entries("head."));
        Checkpoint {
            spec_hash: Checkpoint::hash_descriptor(&self.descriptor()),
            entries,
        }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let encoder = Encoder::from_entries(&ckpt.entries)?;
        let w = find_entry(&ckpt.entries, "head.fc.weight")?;
        let kind = HeadKind::from_shape(w.shape()[0], w.shape()[1]).ok_or_else(|| {
            Error::CheckpointMismatch(format!("no pretext head with weight shape {:?}", w.shape()))
        })?;
        let mut model = PretextModel::new(*encoder.spec(), kind, 0)?;
        model.encoder = encoder;
        check_hash(ckpt, &model.descriptor())?;
        let head: Vec<_> = prefixed(&ckpt.entries, "head.");
        model.head.load_entries("head.", &head)?;
        Ok(model)
    }
}

/// Encoder plus the two-layer classifier used for linear evaluation and
/// finetuning: `64 -> hidden -> classes` with a ReLU in between.
#[derive(Debug, Clone)]
pub struct DownstreamModel {
    pub encoder: Encoder,
    head: ParamStore,
    fc1: (usize, usize),
    fc2: (usize, usize),
    hidden: usize,
    classes: usize,
}

impl DownstreamModel {
    pub fn new(encoder: Encoder, hidden: usize, classes: usize, seed: u64) -> Result<Self> {
        if classes < 2 {
            return Err(Error::TooFewClasses(classes));
        }
        if hidden == 0 {
            return Err(Error::InvalidConfig("hidden width must be positive".into()));
        }
        let mut rng = rng::substream(seed, &[stream::INIT, 2]);
        let mut head = ParamStore::new();
        let fc1 = linear_layer(&mut head, "fc1", LATENT_DIM, hidden, &mut rng);
        let fc2 = linear_layer(&mut head, "fc2", hidden, classes, &mut rng);
        Ok(Self {
            encoder,
            head,
            fc1,
            fc2,
            hidden,
            classes,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.classes
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn head_params(&self) -> &ParamStore {
        &self.head
    }

    pub(crate) fn parts_mut(&mut self) -> (&mut Encoder, &mut ParamStore) {
        (&mut self.encoder, &mut self.head)
    }

    pub fn bind_head(&self, tape: &mut Tape, requires_grad: bool) -> Binding {
        self.head.bind(tape, requires_grad)
    }

    /// Classifier logits from N×64 features already on the tape.
    pub fn head_forward(&self, tape: &mut Tape, head: &Binding, features: Var) -> Result<Var> {
        let h = tape.linear(features, head.var(self.fc1.0), head.var(self.fc1.1))?;
        let h = tape.relu(h)?;
        tape.linear(h, head.var(self.fc2.0), head.var(self.fc2.1))
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        binding: &ModelBinding,
        x: Var,
        mode: Mode,
    ) -> Result<ForwardPass> {
        let pass = self.encoder.forward(tape, &binding.encoder, x, mode)?;
        let logits = self.head_forward(tape, &binding.head, pass.latent)?;
        Ok(ForwardPass {
            logits,
            encoder_passes: vec![pass],
        })
    }

    pub fn bind(&self, tape: &mut Tape, requires_grad: bool) -> ModelBinding {
        ModelBinding {
            encoder: self.encoder.bind(tape, requires_grad),
            head: self.head.bind(tape, requires_grad),
        }
    }

    /// Eval-mode logits for an N×C×H×W batch.
    pub fn classify(&self, batch: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let binding = self.bind(&mut tape, false);
        let x = tape.constant(batch.clone());
        let pass = self.forward(&mut tape, &binding, x, Mode::Eval)?;
        Ok(tape.value(pass.logits).clone())
    }

    /// Logits from precomputed N×64 latents.
    pub fn classify_features(&self, features: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let head = self.bind_head(&mut tape, false);
        let f = tape.constant(features.clone());
        let logits = self.head_forward(&mut tape, &head, f)?;
        Ok(tape.value(logits).clone())
    }

    pub fn descriptor(&self) -> String {
        format!(
            "downstream;{};mlp={}x{}x{}",
            self.encoder.spec().descriptor(),
            LATENT_DIM,
            self.hidden,
            self.classes
        )
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut entries = self.encoder.params().entries("encoder.");
        entries.extend(self.head.entries("classifier."));
        Checkpoint {
            spec_hash: Checkpoint::hash_descriptor(&self.descriptor()),
            entries,
        }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let encoder = Encoder::from_entries(&ckpt.entries)?;
        let fc1 = find_entry(&ckpt.entries, "classifier.fc1.weight")?;
        let fc2 = find_entry(&ckpt.entries, "classifier.fc2.weight")?;
        let mut model = DownstreamModel::new(encoder, fc1.shape()[0], fc2.shape()[0], 0)?;
        check_hash(ckpt, &model.descriptor())?;
        let head = prefixed(&ckpt.entries, "classifier.");
        model.head.load_entries("classifier.", &head)?;
        Ok(model)
    }
}

/// Either kind of saved model.
#[derive(Debug, Clone)]
pub enum AnyModel {
    Pretext(PretextModel),
    Downstream(DownstreamModel),
}

impl AnyModel {
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        if ckpt.entries.iter().any(|(n, _)| n.starts_with("classifier.")) {
            DownstreamModel::from_checkpoint(ckpt).map(AnyModel::Downstream)
        } else {
            PretextModel::from_checkpoint(ckpt).map(AnyModel::Pretext)
        }
    }

    pub fn encoder(&self) -> &Encoder {
        match self {
            AnyModel::Pretext(m) => &m.encoder,
            AnyModel::Downstream(m) => &m.encoder,
        }
    }

    pub fn into_encoder(self) -> Encoder {
        match self {
            AnyModel::Pretext(m) => m.encoder,
            AnyModel::Downstream(m) => m.encoder,
        }
    }
}

fn find_entry<'a>(entries: &'a [(String, Tensor)], name: &str) -> Result<&'a Tensor> {
    entries
        .iter()
        .find(|(n, _)| n == name)
        .map(|(_, t)| t)
        .filter(|t| t.shape().len() == 2)
        .ok_or_else(|| Error::CheckpointMismatch(format!("missing 2-D tensor {name}")))
}

fn prefixed(entries: &[(String, Tensor)], prefix: &str) -> Vec<(String, Tensor)> {
    entries
        .iter()
        .filter(|(n, _)| n.starts_with(prefix))
        .cloned()
        .collect()
}

fn check_hash(ckpt: &Checkpoint, descriptor: &str) -> Result<()> {
    if ckpt.spec_hash != Checkpoint::hash_descriptor(descriptor) {
        return Err(Error::CheckpointMismatch(format!(
            "architecture hash does not match {descriptor}"
        )));
    }
    Ok(())
}
