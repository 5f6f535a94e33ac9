mod support;

use pmad_core::memory::Route;

#[test]
fn full_model_gradient_matches_central_differences() {
    for seed in [1, 2] {
        let err = support::full_model_grad_error(seed, 1e-5);
        println!("seed {seed}: max relative error {err:e}");
        assert!(err <= 1e-4, "seed {seed}: relative error {err:e}");
    }
}

#[test]
fn probe_routes_through_two_items() {
    let (net, probe) = support::tiny_network(1);
    let bank = net.bank.as_ref().unwrap();
    let q = net.model.represent(&probe.patches, &probe.mask).unwrap();
    let out = bank.forward(&q, Route::TopK).unwrap();
    assert_eq!(out.selection.indices.len(), 2);
    let mut lam = out.selection.full_lambda.clone();
    lam.sort_by(|a, b| b.partial_cmp(a).unwrap());
    // no near-tie at the top-K boundary, so finite differences stay on one branch
    assert!(lam[1] - lam[2] > 1e-6);
}
