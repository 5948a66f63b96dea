mod support;

#[test]
fn renders_match_committed_goldens() {
    let mismatched = support::check_goldens().expect("golden files readable");
    assert!(mismatched.is_empty(), "renders differ from goldens: {mismatched:?}");
}

#[test]
fn golden_fixture_is_exact_in_binary32() {
    // Every value stays an integer (or an integer over 64 after pooling), so
    // the binary64 cast reproduces the binary32 surfaces exactly.
    use backmap_core::adjoint::{trace, EvaluationPoint};
    use backmap_core::backmap::Backmapper;
    use backmap_core::network::LayerId;

    let net = support::golden_net();
    let wide = net.cast::<f64>();
    let x = support::golden_input(0);
    let t32 = trace(&net, &x, EvaluationPoint::default()).unwrap();
    let t64 = trace(&wide, &x.cast::<f64>(), EvaluationPoint::default()).unwrap();
    assert!(t32.same_gates(&t64));
    let b32 = Backmapper::new(&net, &t32).unwrap();
    let b64 = Backmapper::new(&wide, &t64).unwrap();
    for k in 0..10 {
        assert_eq!(b32.rm0(k).unwrap().tensor.cast::<f64>(), b64.rm0(k).unwrap().tensor);
    }
    let a = b32.rm4(LayerId::Conv(1), 1, 2, 5).unwrap().tensor;
    assert_eq!(a.cast::<f64>(), b64.rm4(LayerId::Conv(1), 1, 2, 5).unwrap().tensor);
    assert!(a.data().iter().any(|v| *v != 0.0));
}

#[test]
fn difference_render_is_not_blank() {
    let renders = support::golden_renders();
    let (_, diff) = renders.iter().find(|(n, _)| *n == "rm3_difference.png").unwrap();
    let img = backmap_core::render::decode_png(diff).unwrap();
    assert!(!img.is_black());
}
