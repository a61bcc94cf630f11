use candle_core::{Device, Tensor};

use super::stage1::{Stage1Output, TRAIN_DTYPE};
use super::{augment, pk_sample, stage2_lr, AblationFlags, Adam, TrainingLog};
use crate::config::RunConfig;
use crate::encoders::{image_batch, EncoderConfig, EncoderVariant, ImageEncoder, TextEncoder};
use crate::error::{ensure, Result};
use crate::fusion::FusionHead;
use crate::losses::{cell_weights, i2tce, id_ce, mse_align, overall_objective, triplet_batch_hard, ReidTerms};
use crate::nn::{Linear, ParamStore};
use crate::prompts::PromptContextStore;
use crate::rng::{self, stream};
use crate::synthgen::{downsample_parsing, DatasetSplit, IGNORE};

/// What a stage-2 run trains and with which supervision.
#[derive(Clone, Debug, PartialEq)]
pub struct Stage2Options {
    pub flags: AblationFlags,
    /// Include the text-driven terms (image-to-text CE and alignment).
    pub text_terms: bool,
    pub encoder: EncoderConfig,
    /// RNG stream for the encoder initialisation.
    pub init_stream: u64,
}

impl Stage2Options {
    pub fn teacher(cfg: &RunConfig, flags: AblationFlags) -> Self {
        Self {
            flags,
            text_terms: true,
            encoder: cfg.encoder.clone(),
            init_stream: stream::ENCODER_INIT,
        }
    }
}

/// Trained encoder with its training-only head and classifier.
#[derive(Clone, Debug)]
pub struct Stage2Model {
    pub encoder: ImageEncoder,
    pub head: FusionHead,
    pub classifier: Linear,
    pub classifier_params: ParamStore,
    pub flags: AblationFlags,
    pub epochs: usize,
}

impl Stage2Model {
    /// Fresh, untrained model for the given options.
    pub fn init(cfg: &RunConfig, opts: &Stage2Options, num_classes: usize) -> Result<Self> {
        let (h, w) = (cfg.data.height, cfg.data.width);
        let encoder = ImageEncoder::new(&opts.encoder, h, w, TRAIN_DTYPE, cfg.seed, opts.init_stream)?;
        let head = FusionHead::for_encoder(&encoder, &cfg.fusion, cfg.seed)?;
        let mut classifier_params = ParamStore::new(TRAIN_DTYPE);
        let mut r = rng::rng_for(cfg.seed, &[stream::HEAD_INIT, 1]);
        let classifier = Linear::new(
            &mut classifier_params,
            "classifier",
            opts.encoder.embed_dim,
            num_classes,
            false,
            &mut r,
        )?;
        Ok(Self {
            encoder,
            head,
            classifier,
            classifier_params,
            flags: opts.flags,
            epochs: 0,
        })
    }

    /// Stride-8 map used for alignment: fused when F is on, else projected C4.
    pub fn alignment_map(&self, images: &Tensor) -> Result<Tensor> {
        let out = self.encoder.forward(images)?;
        if self.flags.f {
            self.head.forward(&out.taps)
        } else {
            self.head.aligned_c4(&out.taps)
        }
    }
}

/// Per-feature standardisation over the batch ahead of the identity
/// classifier. The classifier is training-only, so no running statistics
/// are kept.
fn batch_neck(x: &Tensor) -> Result<Tensor> {
    let mean = x.mean_keepdim(0)?;
    let centered = x.broadcast_sub(&mean)?;
    let var = centered.sqr()?.mean_keepdim(0)?;
    Ok(centered.broadcast_div(&(var + 1e-5)?.sqrt()?)?)
}

/// Frozen text tables for the alignment targets, with a trailing zero row for
/// ignored cells.
struct TextTables {
    identities: Tensor,
    targets: Option<Tensor>,
    parts_per_row: usize,
}

fn text_tables(prompts: &PromptContextStore, text: &TextEncoder, flags: AblationFlags) -> Result<TextTables> {
    let identities = prompts.encode_identities(text)?.detach();
    let d = identities.dim(1)?;
    let targets = if flags.p {
        Some(prompts.encode_part_table(text, prompts.identities())?.detach())
    } else if flags.h {
        Some(prompts.encode_generic_parts(text)?.detach())
    } else {
        None
    };
    let targets = match targets {
        Some(t) => Some(Tensor::cat(&[&t, &Tensor::zeros((1, d), t.dtype(), &Device::Cpu)?], 0)?),
        None => None,
    };
    Ok(TextTables {
        identities,
        targets,
        parts_per_row: prompts.parts().len(),
    })
}

/// Encoder training against frozen prompts. `flags` choose the Table-2
/// variant: no flag is the plain baseline, H and P add alignment to
/// label-only or identity-aware part prompts, F aligns the fused map.
pub fn run_stage2(
    data: &DatasetSplit,
    cfg: &RunConfig,
    stage1: &Stage1Output,
    text: &TextEncoder,
    opts: &Stage2Options,
    log: &mut TrainingLog,
) -> Result<Stage2Model> {
    opts.flags.validate()?;
    let tc = &cfg.train;
    let prompts = if opts.flags.p { &stage1.part } else { &stage1.warmup };
    ensure!(
        opts.encoder.embed_dim == text.embed_dim(),
        Shape,
        "encoder embedding width {} does not match prompt width {}",
        opts.encoder.embed_dim,
        text.embed_dim()
    );
    let n = data.num_train_ids;
    ensure!(
        prompts.identities().len() == n,
        Precondition,
        "prompt store covers {} identities, training set has {n}",
        prompts.identities().len()
    );
    let mut model = Stage2Model::init(cfg, opts, n)?;
    let tables = text_tables(prompts, text, opts.flags)?;
    let align = opts.text_terms && opts.flags.aligns();

    let mut vars = model.encoder.params().vars();
    vars.extend(model.classifier_params.vars());
    if align {
        vars.extend(model.head.params().vars());
    }
    let mut opt = Adam::new(vars)?;
    let base_lr = match opts.encoder.variant {
        EncoderVariant::Conv => tc.lr_stage2_conv,
        EncoderVariant::Vit => tc.lr_stage2_vit,
    };
    let (h, w) = (cfg.data.height, cfg.data.width);
    let (gh, gw) = (h / 8, w / 8);
    let train = &data.train;
    let steps_per_epoch = (train.len() / tc.batch_size()).max(1);
    let mut rng = rng::rng_for(cfg.seed, &[stream::STAGE2]);
    let mut step = 0;
    for epoch in 0..tc.stage2_epochs {
        let lr = stage2_lr(base_lr, epoch, tc.stage2_epochs, tc.warmup_fraction, &tc.milestones, tc.decay);
        for _ in 0..steps_per_epoch {
            let batch = pk_sample(train, tc.p, tc.k, &mut rng)?;
            let augmented: Vec<_> = batch
                .indices
                .iter()
                .map(|&i| augment(&train[i], &tc.augment, &mut rng))
                .collect();
            let imgs: Vec<&[f32]> = augmented.iter().map(|a| a.image.as_slice()).collect();
            let images = image_batch(&imgs, h, w, TRAIN_DTYPE)?;
            let out = model.encoder.forward(&images)?;
            let labels = &batch.identities;
            let id = id_ce(&model.classifier.forward(&batch_neck(&out.global)?)?, labels, cfg.loss.epsilon)?;
            let triplet = triplet_batch_hard(&out.global, labels, cfg.loss.margin)?;
            let i2t = if opts.text_terms {
                Some(i2tce(&out.global, &tables.identities, labels, cfg.loss.epsilon, cfg.loss.logit_scale)?)
            } else {
                None
            };
            let align_term = match (&tables.targets, align) {
                (Some(table), true) => {
                    let fused = if opts.flags.f {
                        model.head.forward(&out.taps)?
                    } else {
                        model.head.aligned_c4(&out.taps)?
                    };
                    let zero_row = table.dim(0)? - 1;
                    let mut rows = Vec::with_capacity(augmented.len() * gh * gw);
                    let mut weights = Vec::with_capacity(rows.capacity());
                    for (a, &id) in augmented.iter().zip(labels) {
                        let grid = downsample_parsing(&a.parsing, h, w, 8)?;
                        weights.extend(cell_weights(&grid, cfg.loss.background_weight));
                        rows.extend(grid.iter().map(|&p| {
                            if p == IGNORE {
                                zero_row as u32
                            } else if opts.flags.p {
                                (id * tables.parts_per_row + p as usize) as u32
                            } else {
                                p as u32
                            }
                        }));
                    }
                    let d = table.dim(1)?;
                    let target = table
                        .index_select(&Tensor::new(rows.as_slice(), &Device::Cpu)?, 0)?
                        .reshape((augmented.len(), gh, gw, d))?
                        .permute((0, 3, 1, 2))?
                        .contiguous()?;
                    Some(mse_align(&fused, &target, &weights)?)
                }
                _ => None,
            };
            let terms = ReidTerms {
                id,
                triplet,
                i2tce: i2t,
                align: align_term,
            };
            let loss = overall_objective(&terms, &cfg.loss)?;
            opt.step(&loss.backward()?, lr)?;
            log.record(step, "stage2", &terms.values()?)?;
            step += 1;
        }
        model.epochs = epoch + 1;
    }
    Ok(model)
}

/// Paired student runs sharing data, initialisation and batch order.
#[derive(Clone, Debug)]
pub struct StudentRuns {
    pub with_prompts: Stage2Model,
    pub baseline: Stage2Model,
}

/// Trains a half-width convolutional student with the frozen prompts and a
/// student baseline that sees only identity and triplet losses.
pub fn train_student(
    data: &DatasetSplit,
    cfg: &RunConfig,
    stage1: &Stage1Output,
    text: &TextEncoder,
    log: &mut TrainingLog,
) -> Result<StudentRuns> {
    let mut student = cfg.encoder.half_width();
    student.variant = EncoderVariant::Conv;
    let with = Stage2Options {
        flags: AblationFlags::BPF,
        text_terms: true,
        encoder: student.clone(),
        init_stream: stream::STUDENT_INIT,
    };
    let base = Stage2Options {
        flags: AblationFlags::B,
        text_terms: false,
        ..with.clone()
    };
    Ok(StudentRuns {
        with_prompts: run_stage2(data, cfg, stage1, text, &with, log)?,
        baseline: run_stage2(data, cfg, stage1, text, &base, log)?,
    })
}
