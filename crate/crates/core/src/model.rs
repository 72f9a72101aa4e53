use crate::boundary::{LabelMap, IGNORE};
use crate::config::EncoderConfig;
use crate::error::{Error, Result};
use crate::geometry::{ScaleLevel, TokenKey, TokenSet, FINEST_SIDE, NUM_LEVELS};
use crate::nn::Init;
use crate::stage1::{run_stage1, AllocationTrace, BatchLayout, ForwardOptions, Sample, Stage1Params};
use crate::stage2::{densify_finest, emit_stage1, run_stage2, Emitted, HeadParams, Stage2Params};
use crate::tensor::{ParamStore, Tape, Tensor, Var};

/// Encoder, Stage-2 refiner and per-cell classifier with their parameters.
#[derive(Clone, Debug)]
pub struct Model {
    cfg: EncoderConfig,
    store: ParamStore,
    stage1: Stage1Params,
    stage2: Option<Stage2Params>,
    head: HeadParams,
}

pub struct ForwardPass {
    pub sets: Vec<TokenSet>,
    pub traces: Vec<AllocationTrace>,
    pub layout: BatchLayout,
    pub emitted: Emitted,
    /// Densified cell features, `batch · cells` rows.
    pub dense: Var,
    pub logits: Var,
    pub cells: usize,
    pub alloc_loss: Option<Var>,
    pub head_loss: Option<Var>,
    pub loss: Option<Var>,
    /// Sort comparisons spent on clustering, per sample.
    pub comparisons: Vec<u64>,
}

impl ForwardPass {
    pub fn sample_rows(&self, tape: &Tape, v: Var, b: usize) -> Tensor {
        let t = tape.value(v);
        let c = t.cols();
        let data = t.data()[b * self.cells * c..(b + 1) * self.cells * c].to_vec();
        Tensor::new(vec![self.cells, c], data).expect("row slice")
    }

    pub fn sample_logits(&self, tape: &Tape, b: usize) -> Tensor {
        self.sample_rows(tape, self.logits, b)
    }

    pub fn sample_dense(&self, tape: &Tape, b: usize) -> Tensor {
        self.sample_rows(tape, self.dense, b)
    }

    /// Per-level `(keys, features)` emitted for sample `b`.
    pub fn sample_emitted(&self, tape: &Tape, b: usize) -> Vec<(Vec<TokenKey>, Tensor)> {
        (0..NUM_LEVELS)
            .map(|l| {
                let keys = self.sets[b].level(ScaleLevel::new(l as u8).expect("level < 4")).to_vec();
                let t = tape.value(self.emitted.levels[l]);
                let c = t.cols();
                let start = b * self.layout.padded[l] * c;
                let data = t.data()[start..start + keys.len() * c].to_vec();
                (keys.clone(), Tensor::new(vec![keys.len(), c], data).expect("row slice"))
            })
            .collect()
    }

    /// Argmax class per cell for sample `b`.
    pub fn predictions(&self, tape: &Tape, b: usize) -> Vec<u16> {
        let logits = self.sample_logits(tape, b);
        (0..logits.rows())
            .map(|r| {
                let row = logits.row(r);
                let mut best = 0;
                for (j, v) in row.iter().enumerate() {
                    if *v > row[best] {
                        best = j;
                    }
                }
                best as u16
            })
            .collect()
    }
}

/// Per-cell class pixel counts, IGNORE excluded.
pub fn cell_label_counts(labels: &LabelMap, classes: usize) -> Result<Tensor> {
    let (ch, cw) = (labels.height() / FINEST_SIDE, labels.width() / FINEST_SIDE);
    let mut counts = vec![0.0; (ch * cw) as usize * classes];
    for y in 0..ch * FINEST_SIDE {
        for x in 0..cw * FINEST_SIDE {
            let l = labels.get(y, x);
            if l == IGNORE {
                continue;
            }
            if l as usize >= classes {
                return Err(Error::Input(format!("label {l} at ({y}, {x}) exceeds {classes} classes")));
            }
            let cell = ((y / FINEST_SIDE) * cw + x / FINEST_SIDE) as usize;
            counts[cell * classes + l as usize] += 1.0;
        }
    }
    Tensor::new(vec![(ch * cw) as usize, classes], counts)
}

impl Model {
    pub fn new(cfg: EncoderConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let mut init = Init::new(&mut store, seed);
        let stage1 = Stage1Params::new(&mut init, &cfg);
        let stage2 = (!cfg.stage1_only).then(|| Stage2Params::new(&mut init, &cfg));
        let head = HeadParams::new(&mut init, &cfg);
        Ok(Model { cfg, store, stage1, stage2, head })
    }

    /// Model with the given parameter values; names and shapes must match
    /// the configuration's layout exactly.
    pub fn with_params(cfg: EncoderConfig, params: ParamStore) -> Result<Self> {
        let mut model = Model::new(cfg, 0)?;
        if params.len() != model.store.len() {
            return Err(Error::Format { what: "parameters", detail: format!("{} arrays, expected {}", params.len(), model.store.len()) });
        }
        for id in model.store.ids().collect::<Vec<_>>() {
            let name = model.store.name(id).to_string();
            let src = params.id(&name).ok_or_else(|| Error::Format { what: "parameters", detail: format!("missing {name}") })?;
            model.store.set(id, params.get(src).clone()).map_err(|e| Error::Format { what: "parameters", detail: e.to_string() })?;
        }
        Ok(model)
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.cfg
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn stage1_params(&self) -> &Stage1Params {
        &self.stage1
    }

    pub fn stage2_params(&self) -> Option<&Stage2Params> {
        self.stage2.as_ref()
    }

    pub fn head_params(&self) -> &HeadParams {
        &self.head
    }

    pub fn forward(&self, tape: &mut Tape, batch: &[Sample], opts: &ForwardOptions) -> Result<ForwardPass> {
        let cfg = &self.cfg;
        let s1 = run_stage1(tape, &self.store, &self.stage1, cfg, batch, opts)?;
        let (emitted, extra) = match &self.stage2 {
            Some(p) => run_stage2(tape, &self.store, p, cfg, &s1)?,
            None => (emit_stage1(tape, &s1)?, vec![0; batch.len()]),
        };
        let comparisons = s1.comparisons.iter().zip(&extra).map(|(a, b)| a + b).collect();
        let dense = densify_finest(tape, &self.store, &self.head, &emitted, &s1.layout, &s1.sets)?;
        tape.set_scope("head.classifier");
        let logits = self.head.classifier.forward(tape, &self.store, dense)?;
        let cells = tape.value(logits).rows() / batch.len();

        tape.set_scope("loss");
        let head_loss = if batch.iter().all(|s| s.labels.is_some()) {
            let mut counts = Vec::with_capacity(batch.len() * cells * cfg.num_classes);
            for s in batch {
                counts.extend(cell_label_counts(s.labels.expect("checked"), cfg.num_classes)?.into_data());
            }
            let counts = Tensor::new(vec![batch.len() * cells, cfg.num_classes], counts)?;
            Some(tape.soft_cross_entropy(logits, counts)?)
        } else {
            None
        };
        let loss = match (s1.alloc_loss, head_loss) {
            (Some(a), Some(h)) => {
                let h = tape.scale(h, opts.head_weight);
                Some(tape.add(a, h)?)
            }
            (a, h) => a.or(h),
        };
        Ok(ForwardPass {
            sets: s1.sets,
            traces: s1.traces,
            layout: s1.layout,
            emitted,
            dense,
            logits,
            cells,
            alloc_loss: s1.alloc_loss,
            head_loss,
            loss,
            comparisons,
        })
    }
}
