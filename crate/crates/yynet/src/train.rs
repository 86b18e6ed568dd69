//! The training loop: seeded batches, forward/backward, clipping, AdamW
//! with the one-cycle schedule, lr-coupled weight decay at epoch ends, the
//! weight EMA, per-epoch evaluation, metrics and checkpointing.

use std::path::Path;
use std::time::Instant;

use yynet_core::nn::softmax_cross_entropy;
use yynet_core::optim::{clip_gradients, couple_weight_decay, onecycle_lr, Ema};
use yynet_core::rng;
use yynet_core::Tape;

use crate::checkpoint::{self, TrainState};
use crate::data::{batches, ChannelStats, DatasetSplit};
use crate::error::{AppError, AppResult};
use crate::metrics::{MetricsRow, MetricsWriter};

pub struct TrainOutcome {
    pub final_accuracy: f64,
    /// Mean train loss per epoch, in order.
    pub epoch_losses: Vec<f64>,
}

/// Top-1 accuracy of the current model on a split. Uses the EMA shadow
/// when requested and active, restoring live weights afterwards.
pub fn evaluate(
    state: &TrainState,
    split: &DatasetSplit,
    stats: &ChannelStats,
    use_shadow: bool,
) -> AppResult<f64> {
    let saved = if use_shadow { state.ema.swap_in(&state.opt.params) } else { None };
    let result = evaluate_live(state, split, stats);
    if let Some(saved) = saved {
        Ema::restore(&state.opt.params, saved);
    }
    result
}

fn evaluate_live(state: &TrainState, split: &DatasetSplit, stats: &ChannelStats) -> AppResult<f64> {
    if split.is_empty() {
        return Err(AppError::Data("empty evaluation split".into()));
    }
    let mut correct = 0usize;
    for batch in batches(split, 250, stats, 0, 0, false, false) {
        let logits = state.model.forward_eval(&batch.images)?;
        let k = state.config.model.num_classes;
        let data = logits.data();
        for (i, &label) in batch.labels.iter().enumerate() {
            let row = &data[i * k..(i + 1) * k];
            let pred = row
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap_or(std::cmp::Ordering::Equal))
                .map(|(j, _)| j)
                .unwrap();
            correct += usize::from(pred == label);
        }
    }
    Ok(correct as f64 / split.len() as f64)
}

/// Run (or resume) training to completion. Writes `metrics.csv` and
/// `checkpoint.ckpt` under `out_dir`.
pub fn train(
    state: &mut TrainState,
    train_split: &DatasetSplit,
    test_split: &DatasetSplit,
    stats: &ChannelStats,
    out_dir: &Path,
    verbose: bool,
) -> AppResult<TrainOutcome> {
    std::fs::create_dir_all(out_dir)
        .map_err(|e| AppError::Io(format!("cannot create {}: {e}", out_dir.display())))?;
    let tc = state.config.train.clone();
    let steps_per_epoch = train_split.len().div_ceil(tc.batch_size);
    let total_steps = tc.epochs * steps_per_epoch;
    let metrics_path = out_dir.join("metrics.csv");
    let ckpt_path = out_dir.join("checkpoint.ckpt");
    let resuming = state.progress.global_step > 0;
    let mut metrics = if resuming {
        MetricsWriter::append(&metrics_path)?
    } else {
        MetricsWriter::create(&metrics_path)?
    };
    let start = Instant::now();

    if total_steps > 0 && !resuming {
        // Initial coupling: wd follows the initial lr.
        let lr0 = onecycle_lr(0, total_steps, tc.max_lr, &tc.onecycle)?;
        state.progress.current_wd = couple_weight_decay(tc.wd_lr_multiplier, lr0);
    }

    let mut epoch_losses = Vec::new();
    for epoch in state.progress.completed_epochs..tc.epochs {
        let epoch_batches = batches(
            train_split,
            tc.batch_size,
            stats,
            tc.seed,
            epoch,
            true,
            tc.augment,
        );
        let mut dropout_rng = rng::derive(tc.seed, 0xd0_0000 ^ epoch as u64);
        let mut loss_sum = 0.0f64;
        let mut last_lr = 0.0f64;
        let wd = state.progress.current_wd;
        for batch in &epoch_batches {
            let step = state.progress.global_step as usize;
            let lr = onecycle_lr(step, total_steps, tc.max_lr, &tc.onecycle)?;
            last_lr = lr;
            let tape = Tape::new();
            state.model.attach_params(&tape);
            let logits = state.model.forward(&batch.images, true, &mut dropout_rng)?;
            let loss = softmax_cross_entropy(&logits, &batch.labels)?;
            let loss_val = loss.item() as f64;
            if !loss_val.is_finite() {
                return Err(AppError::Diverged(format!(
                    "non-finite loss at step {step} of epoch {epoch}"
                )));
            }
            loss.backward()?;
            drop(tape);
            clip_gradients(&state.opt.params, tc.clip_norm, tc.clip_mode);
            state.opt.step(lr, wd)?;
            state
                .ema
                .update(&state.opt.params, step, total_steps, tc.ema_start_fraction);
            state.model.zero_grads();
            loss_sum += loss_val;
            metrics.write(&MetricsRow {
                epoch,
                step: state.progress.global_step,
                train_loss: loss_val,
                lr,
                wd,
                test_accuracy: None,
                ema_active: state.ema.active(),
                wall_time_s: start.elapsed().as_secs_f64(),
            })?;
            state.progress.global_step += 1;
        }
        // Epoch boundary: couple wd to the epoch-end lr, evaluate, persist.
        state.progress.current_wd = couple_weight_decay(tc.wd_lr_multiplier, last_lr);
        let epoch_loss = loss_sum / epoch_batches.len().max(1) as f64;
        epoch_losses.push(epoch_loss);
        let acc = evaluate(state, test_split, stats, tc.ema_eval_shadow)?;
        metrics.write(&MetricsRow {
            epoch,
            step: state.progress.global_step.saturating_sub(1),
            train_loss: epoch_loss,
            lr: last_lr,
            wd: state.progress.current_wd,
            test_accuracy: Some(acc),
            ema_active: state.ema.active(),
            wall_time_s: start.elapsed().as_secs_f64(),
        })?;
        state.progress.completed_epochs = epoch + 1;
        checkpoint::save(&ckpt_path, state)?;
        if verbose {
            eprintln!(
                "epoch {epoch}: mean loss {epoch_loss:.4}, test accuracy {:.2}% (ema {})",
                acc * 100.0,
                state.ema.active()
            );
        }
    }

    let final_accuracy = evaluate(state, test_split, stats, tc.ema_eval_shadow)?;
    checkpoint::save(&ckpt_path, state)?;
    Ok(TrainOutcome { final_accuracy, epoch_losses })
}
