//! Finite-difference checks of every head's end-to-end loss on small random
//! models and inputs.

mod common;

use common::{build, check_fusion_logits, check_head, random_model, random_sample, CFG};
use rand::Rng;
use ume::encoder::Task;
use ume::nn::Ctx;
use ume::train::{total_loss, LossWeights};
use ume_tensor::gradcheck::grad_check;
use ume_tensor::rng::seeded;
use ume_tensor::Fault;

#[test]
fn diarization_loss_gradients() {
    check_head(Task::Diar, |rng, _| rng.gen_range(16..40), 2);
}

#[test]
fn separation_loss_gradients() {
    check_head(Task::Sep, |rng, _| rng.gen_range(56..72), 2);
}

#[test]
fn asr_loss_gradients() {
    // three to four recognizer frames
    check_head(Task::Asr, |rng, _| rng.gen_range(48..64), 2);
}

#[test]
fn total_loss_gradients_reach_fusion_logits() {
    check_fusion_logits();
}

fn is_conv_kernel(name: &str) -> bool {
    name.ends_with("conv.weight")
        || name.ends_with("conv1.weight")
        || name.ends_with("conv2.weight")
        || name == "sep.analysis.weight"
}

#[test]
fn corrupted_conv_gradients_are_flagged_exactly() {
    let mut rng = seeded(5, 79);
    let cfg = random_model(&mut rng, 2, 3);
    let sample = random_sample(&mut rng, 60, 2, 3, 2);
    let (model, mut store) = build(&cfg, 5);
    let w = LossWeights::default();
    let report = grad_check(
        &mut store,
        None,
        |g, s| {
            g.inject_fault(Fault::CorruptConv1dWeightGrad);
            Ok(total_loss(Ctx::new(g, s), &model, &[&sample], &w)
                .expect("loss records")
                .0)
        },
        CFG,
    )
    .unwrap();
    let mut flagged: Vec<&str> = report.failures();
    flagged.sort();
    let mut expected: Vec<&str> = store.names().filter(|n| is_conv_kernel(n)).collect();
    expected.sort();
    assert!(expected.len() >= 4);
    assert_eq!(flagged, expected);
}
