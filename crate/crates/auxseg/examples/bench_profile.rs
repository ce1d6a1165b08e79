use auxseg::data::Rng;
use auxseg::layers::{conv2d, maxpool2, softmax_channels, transposed_conv2d, ConvSpec, TransposedConvSpec};
use auxseg::models::{ModelGraph, ModelKind};
use auxseg::tensor::Tensor;
use std::time::Instant;

fn timeit(label: &str, reps: usize, mut f: impl FnMut()) {
    let t0 = Instant::now();
    for _ in 0..reps { f(); }
    println!("{label:<34} {:>7.2} ms/it", t0.elapsed().as_secs_f64() * 1000.0 / reps as f64);
}

fn rand_tensor(shape: &[usize], seed: u64, grad: bool) -> Tensor {
    let mut rng = Rng::new(seed);
    let n: usize = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.next_f64() - 0.5).collect(), grad).unwrap()
}

fn main() {
    let reps = 30;
    let mut rng = Rng::new(3);
    // encoder shapes at batch 16, 32x48
    let c1 = ConvSpec::new(3, 16, 3, 1, 1, &mut rng);
    let c2 = ConvSpec::new(16, 32, 3, 1, 1, &mut rng);
    let c3 = ConvSpec::new(32, 64, 3, 1, 1, &mut rng);
    let x1 = rand_tensor(&[16, 3, 32, 48], 1, false);
    let x2 = rand_tensor(&[16, 16, 16, 24], 2, true);
    let x3 = rand_tensor(&[16, 32, 8, 12], 3, true);

    timeit("conv1 fwd (3->16 @32x48)", reps, || { std::hint::black_box(conv2d(&x1, &c1).unwrap().data()[0]); });
    timeit("conv2 fwd (16->32 @16x24)", reps, || { std::hint::black_box(conv2d(&x2, &c2).unwrap().data()[0]); });
    timeit("conv3 fwd (32->64 @8x12)", reps, || { std::hint::black_box(conv2d(&x3, &c3).unwrap().data()[0]); });
    timeit("conv1 fwd+bwd (dW only)", reps, || {
        conv2d(&x1, &c1).unwrap().mean().unwrap().backward().unwrap();
        c1.weights.zero_grad(); c1.bias.zero_grad();
    });
    timeit("conv2 fwd+bwd (dW+dIn)", reps, || {
        conv2d(&x2, &c2).unwrap().mean().unwrap().backward().unwrap();
        c2.weights.zero_grad(); c2.bias.zero_grad(); x2.zero_grad();
    });
    timeit("conv3 fwd+bwd (dW+dIn)", reps, || {
        conv2d(&x3, &c3).unwrap().mean().unwrap().backward().unwrap();
        c3.weights.zero_grad(); c3.bias.zero_grad(); x3.zero_grad();
    });

    let up1 = TransposedConvSpec::new(64, 10, 2, 2, &mut rng);
    let bott = rand_tensor(&[16, 64, 4, 6], 4, true);
    timeit("tconv up1 fwd+bwd", reps, || {
        transposed_conv2d(&bott, &up1).unwrap().mean().unwrap().backward().unwrap();
        up1.weights.zero_grad(); up1.bias.zero_grad(); bott.zero_grad();
    });

    let pool_in = rand_tensor(&[16, 16, 32, 48], 5, true);
    timeit("maxpool2 fwd+bwd @16ch 32x48", reps, || {
        maxpool2(&pool_in).unwrap().mean().unwrap().backward().unwrap();
        pool_in.zero_grad();
    });
    let sm_in = rand_tensor(&[16, 4, 32, 48], 6, true);
    timeit("softmax fwd+bwd @4ch 32x48", reps, || {
        softmax_channels(&sm_in).unwrap().mean().unwrap().backward().unwrap();
        sm_in.zero_grad();
    });

    // whole model for reference
    let model = ModelGraph::build(ModelKind::AuxNet, 3, 4, 32, 48, 1).unwrap();
    let xb = rand_tensor(&[16, 3, 32, 48], 7, false);
    timeit("auxnet fwd", reps, || { std::hint::black_box(model.forward(&xb).unwrap().seg_logits.data()[0]); });
    timeit("auxnet fwd+bwd(sum heads)", reps, || {
        let out = model.forward(&xb).unwrap();
        let s = out.seg_logits.mean().unwrap().add(&out.depth.unwrap().mean().unwrap()).unwrap();
        s.backward().unwrap();
        model.zero_grads();
    });
}
