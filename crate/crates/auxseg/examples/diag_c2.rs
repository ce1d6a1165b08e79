use auxseg::data::{gen_scene, Rng};
use auxseg::layers::softmax_channels;
use auxseg::models::{ModelGraph, ModelKind};
use auxseg::tasks::{depth_loss, seg_loss, DepthTarget, SegTarget};
use auxseg::tensor::Tensor;
use auxseg::weighting::{WeightRule, WeightStrategy};

fn main() {
    let (h, w) = (32usize, 48usize);
    let scenes: Vec<_> = (0..2).map(|i| gen_scene(900 + i as u64, h, w).unwrap()).collect();
    let mut data = Vec::new();
    for s in &scenes { data.extend_from_slice(&s.image); }
    let x = Tensor::from_vec(&[2, 3, h, w], data, false).unwrap();
    let labels = scenes.iter().flat_map(|s| s.labels.iter().copied()).collect();
    let target = SegTarget::new(2, h, w, labels, None).unwrap();
    let depth = scenes.iter().flat_map(|s| s.depth.iter().copied()).collect();
    let dtarget = DepthTarget::new(2, h, w, depth).unwrap();

    let model = ModelGraph::build(ModelKind::AuxNet, 3, 4, h, w, 17).unwrap();
    let params = model.named_params();
    let losses = |m: &ModelGraph| {
        let out = m.forward(&x).unwrap();
        let probs = softmax_channels(&out.seg_logits).unwrap();
        let ls = seg_loss(&probs, &target).unwrap();
        let ld = depth_loss(&out.depth.unwrap(), &dtarget).unwrap();
        (ls, ld)
    };
    model.zero_grads();
    let (ls, ld) = losses(&model);
    let mut strategy = WeightStrategy::new(WeightRule::Fixed { lambda_seg: 400.0, lambda_depth: 1.0 });
    let res = strategy.step(&ls, &ld).unwrap();
    res.total.backward().unwrap();
    let analytic: Vec<Vec<f64>> = params.iter().map(|(_, t)| t.grad().unwrap_or_else(|| vec![0.0; t.numel()])).collect();
    let (lam_s, lam_d) = (res.lambda_seg, res.lambda_depth);
    let eval = || { let (ls, ld) = losses(&model); lam_s * ls.value() + lam_d * ld.value() };
    let f_base = eval();
    let floor = 1e-5 * f_base.abs().max(1.0);
    println!("f_base {f_base}, floor {floor}");

    let mut rng = Rng::new(4242);
    let mut entries = vec![];
    for _ in 0..200 {
        let pi = rng.below(params.len() as u64) as usize;
        let ei = rng.below(params[pi].1.numel() as u64) as usize;
        entries.push((pi, ei));
    }
    let mut rows: Vec<(f64, usize, usize, f64, f64, f64)> = vec![];
    for &(pi, ei) in &entries {
        let t = &params[pi].1;
        let orig = t.data()[ei];
        let fd_at = |step: f64| {
            t.set_data_at(ei, orig + step);
            let up = eval();
            t.set_data_at(ei, orig - step);
            let down = eval();
            t.set_data_at(ei, orig);
            (up - down) / (2.0 * step)
        };
        let fd = fd_at(1e-5);
        let fd2 = fd_at(5e-6);
        let g = analytic[pi][ei];
        let rel = (fd - g).abs() / fd.abs().max(g.abs()).max(floor);
        rows.push((rel, pi, ei, fd, g, (fd - fd2).abs()));
    }
    rows.sort_by(|a, b| b.0.total_cmp(&a.0));
    for r in rows.iter().take(8) {
        println!("rel {:.3e}  param {} ({})  fd {:.6e} g {:.6e}  |fd(h)-fd(h/2)| {:.3e}",
            r.0, r.1, params[r.1].0, r.3, r.4, r.5);
    }
    let above = rows.iter().filter(|r| r.0 > 1e-4).count();
    println!("{above} of 200 entries above 1e-4");
}
