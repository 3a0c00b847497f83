//! The iterative attack loop: composite loss, normalized-gradient steps,
//! ball projection with re-initialization, the random-mask heuristic, and
//! the query gates tying everything together.

use ndarray::Array2;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::AttackConfig;
use crate::model::LocalModel;
use crate::reconstruct::{antonym_filter, decode_tokens, is_novel, AntonymLexicon, SentenceScorer};
use crate::types::{
    frobenius_norm, AttackOutcome, CandidateAdversary, LabeledSample, PerturbationState,
    StepReport, TokenSequence,
};
use crate::victim::VictimClient;
use crate::{Error, Result};

/// Gradient norms below this cannot define a step direction.
const DEGENERATE_GRAD_NORM: f64 = 1e-12;

/// Composite objective: task loss plus the weighted decoding loss.
/// `beta` is negative, so raising the composite raises the task loss while
/// holding reconstruction together.
pub fn composite_loss(task_loss: f64, mlm_loss: f64, beta: f64) -> f64 {
    task_loss + beta * mlm_loss
}

/// Draw a fresh perturbation uniformly inside the epsilon ball: each entry
/// is uniform in `[-eps, eps]` scaled by `1/sqrt(rows*cols)`, which bounds
/// the flattened L2 norm by `eps`. Special rows are zeroed.
fn reinit_draw(
    shape: (usize, usize),
    epsilon: f64,
    special_mask: &[bool],
    rng: &mut impl Rng,
) -> Array2<f64> {
    let scale = epsilon / ((shape.0 * shape.1) as f64).sqrt();
    let mut fresh = Array2::from_shape_fn(shape, |_| rng.random_range(-1.0..=1.0) * scale);
    zero_special_rows(&mut fresh, special_mask);
    fresh
}

fn zero_special_rows(m: &mut Array2<f64>, special_mask: &[bool]) {
    for (i, &special) in special_mask.iter().enumerate() {
        if special {
            m.row_mut(i).fill(0.0);
        }
    }
}

/// Keep `delta` unchanged while it stays inside the epsilon ball; once it
/// escapes, replace it with a fresh random draw inside the ball. The
/// returned matrix always satisfies the norm bound.
pub fn project_or_reinit(
    delta: &Array2<f64>,
    epsilon: f64,
    special_mask: &[bool],
    rng: &mut impl Rng,
) -> (Array2<f64>, bool) {
    if frobenius_norm(delta) <= epsilon {
        (delta.clone(), false)
    } else {
        let fresh = reinit_draw((delta.nrows(), delta.ncols()), epsilon, special_mask, rng);
        (fresh, true)
    }
}

/// One projected-gradient step: move `alpha` along the normalized gradient
/// (special rows excluded from both the direction and its norm, so the step
/// length is exactly `alpha`), then project or re-initialize.
///
/// Returns whether a re-initialization fired.
pub fn pgd_step(
    state: &mut PerturbationState,
    grad: &Array2<f64>,
    alpha: f64,
    epsilon: f64,
    rng: &mut impl Rng,
) -> Result<bool> {
    if grad.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteLoss);
    }
    let mut direction = grad.clone();
    zero_special_rows(&mut direction, &state.special_mask);
    let norm = frobenius_norm(&direction);
    if norm < DEGENERATE_GRAD_NORM {
        return Err(Error::DegenerateGradient(norm));
    }
    let candidate = &state.delta + &direction.mapv(|v| v * alpha / norm);
    let (projected, reinitialized) =
        project_or_reinit(&candidate, epsilon, &state.special_mask, rng);
    state.delta = projected;
    state.step += 1;
    Ok(reinitialized)
}

/// Replace one uniformly chosen non-special position with the mask token.
pub fn mask_random_token(
    tokens: &TokenSequence,
    model: &dyn LocalModel,
    rng: &mut impl Rng,
) -> Result<TokenSequence> {
    let content = tokens.content_positions();
    if content.is_empty() {
        return Err(Error::NoMaskablePosition);
    }
    let target = content[rng.random_range(0..content.len())];
    let mut masked = tokens.clone();
    masked.token_ids[target] = model.mask_token_id();
    masked.surface = model.detokenize(&masked);
    Ok(masked)
}

/// Immutable wiring of one attack: the local model supplying gradients and
/// decodings, the similarity scorer, and an optional antonym lexicon.
pub struct AttackContext<'a> {
    pub local: &'a dyn LocalModel,
    pub scorer: &'a dyn SentenceScorer,
    pub lexicon: Option<&'a AntonymLexicon>,
}

/// Run one attack session. The caller guarantees the victim initially
/// classifies the sample correctly.
pub fn run_attack(
    sample: &LabeledSample,
    ctx: &AttackContext<'_>,
    victim: &mut VictimClient,
    cfg: &AttackConfig,
) -> Result<AttackOutcome> {
    run_attack_traced(sample, ctx, victim, cfg, &mut |_| {})
}

/// [`run_attack`] with a per-step telemetry sink.
pub fn run_attack_traced(
    sample: &LabeledSample,
    ctx: &AttackContext<'_>,
    victim: &mut VictimClient,
    cfg: &AttackConfig,
    on_step: &mut dyn FnMut(&StepReport),
) -> Result<AttackOutcome> {
    let local = ctx.local;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.random_seed);
    let queries_before = victim.queries_made();

    let original = local.tokenize(&sample.text_a, sample.text_b.as_deref())?;
    let work = if cfg.mask_one_token {
        mask_random_token(&original, local, &mut rng)?
    } else {
        original.clone()
    };

    let base = local.embed(&work)?;
    let mut state = PerturbationState::new(base, work.special_mask.clone());

    // Seed the decoding set with the decoding of the unperturbed input and
    // with the original tokens themselves, so neither is ever queried.
    let clean_hidden = local.forward_hidden(&state.base_embeddings)?;
    let baseline = decode_tokens(&local.mlm_logits(&clean_hidden), &work, local);
    state.previous_decodings.insert(baseline.token_ids);
    state.previous_decodings.insert(original.token_ids.clone());

    let failure = |state: &PerturbationState, victim: &VictimClient| AttackOutcome {
        sample_id: sample.id.clone(),
        success: false,
        adversarial_text: None,
        queries_used: victim.queries_made() - queries_before,
        iterations_used: state.step,
        final_similarity: None,
    };

    while state.step < cfg.max_iterations {
        let (loss, grad) = local.loss_and_grad(
            &state.base_embeddings,
            &state.delta,
            &original,
            sample.gold_label,
            cfg.beta,
        )?;

        let grad_norm;
        let reinitialized;
        match pgd_step(&mut state, &grad, cfg.alpha, cfg.epsilon, &mut rng) {
            Ok(flag) => {
                let mut masked = grad.clone();
                zero_special_rows(&mut masked, &state.special_mask);
                grad_norm = frobenius_norm(&masked);
                reinitialized = flag;
            }
            Err(Error::DegenerateGradient(norm)) => {
                // No usable direction here: jump to a fresh start inside
                // the ball and spend the iteration on it.
                state.delta = reinit_draw(
                    (state.delta.nrows(), state.delta.ncols()),
                    cfg.epsilon,
                    &state.special_mask,
                    &mut rng,
                );
                state.step += 1;
                grad_norm = norm;
                reinitialized = true;
            }
            Err(e) => return Err(e),
        }

        on_step(&StepReport {
            step: state.step,
            loss,
            grad_norm,
            delta_norm: state.delta_norm(),
            reinitialized,
        });

        let hidden = local.forward_hidden(&state.perturbed())?;
        let candidate_tokens = decode_tokens(&local.mlm_logits(&hidden), &work, local);

        if !is_novel(&candidate_tokens, &state.previous_decodings) {
            continue;
        }
        state
            .previous_decodings
            .insert(candidate_tokens.token_ids.clone());

        let sim = ctx
            .scorer
            .score(&original.surface, &candidate_tokens.surface)?;
        let candidate = CandidateAdversary {
            tokens: candidate_tokens,
            similarity_to_original: sim,
            is_novel: true,
            iteration_found: state.step,
        };

        // Query gate 2: strictly more similar than anything queried before.
        if sim <= state.similarity_bar() {
            continue;
        }
        if let Some(lexicon) = ctx.lexicon {
            if !antonym_filter(&original, &candidate.tokens, lexicon, local) {
                continue;
            }
        }
        if victim.queries_made() - queries_before >= cfg.max_queries {
            break;
        }

        let (text_a, text_b) = split_segments(&candidate.tokens, local);
        let decision = victim.classify(&text_a, text_b.as_deref())?;
        state.best_similarity_so_far = Some(sim);

        if decision.predicted_label != sample.gold_label
            && crate::reconstruct::accept_adversary(&candidate, cfg.use_threshold)
        {
            return Ok(AttackOutcome {
                sample_id: sample.id.clone(),
                success: true,
                adversarial_text: Some(candidate.tokens.surface.clone()),
                queries_used: victim.queries_made() - queries_before,
                iterations_used: state.step,
                final_similarity: Some(sim),
            });
        }
    }

    Ok(failure(&state, victim))
}

/// Split a token sequence at its flagged separator into victim-query
/// segments.
fn split_segments(tokens: &TokenSequence, model: &dyn LocalModel) -> (String, Option<String>) {
    let mut segments: Vec<Vec<&str>> = vec![Vec::new()];
    for (i, &id) in tokens.token_ids.iter().enumerate() {
        if tokens.special_mask[i] {
            if id == model.mask_token_id() {
                continue;
            }
            // a flagged mid-sequence separator starts the second segment
            if i > 0 && i + 1 < tokens.len() && segments.len() == 1 {
                segments.push(Vec::new());
            }
            continue;
        }
        segments
            .last_mut()
            .expect("at least one segment")
            .push(model.token_surface(id));
    }
    let text_a = segments[0].join(" ");
    let text_b = segments.get(1).map(|s| s.join(" "));
    (text_a, text_b)
}
