use backmap_core::network::{build_vgg7, Init};
use backmap_core::trainer::cifar::{normalize, synthetic_example};
use backmap_core::trainer::{apply_step, batch_loss_and_gradients, RGB_MEANS, RGB_STDS};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn full_batch_loss_decreases_over_the_first_steps() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let batch: Vec<_> = (0..500)
        .map(|n| {
            let ex = synthetic_example((n % 10) as u8, &mut rng);
            (normalize::<f32>(&ex.unit(), &RGB_MEANS, &RGB_STDS), n % 10)
        })
        .collect();
    let mut net = build_vgg7::<f32>().initialized(Init::He, 1);
    let mut losses = Vec::new();
    for _ in 0..4 {
        let (loss, grads) = batch_loss_and_gradients(&net, &batch, 1e-4).unwrap();
        losses.push(loss);
        apply_step(&mut net, &grads, 2e-4);
    }
    assert!(losses.windows(2).all(|w| w[1] < w[0]), "{losses:?}");
}
