use voxfield::harness::{convergence_scene, convergence_study};

#[test]
fn render_converges_to_closed_form() {
    let (scene, contraction, level, cam) = convergence_scene();
    let rows = convergence_study(&scene, &contraction, level, &cam, 0.5, 8.0, &[32, 64, 128, 256, 512]).unwrap();
    for r in &rows {
        println!("N={:4} color {:.3e} depth {:.3e}", r.samples, r.color_error, r.depth_error);
    }
    let last = rows.last().unwrap();
    assert!(last.color_error < 1e-4 && last.depth_error < 1e-4);
    for w in rows.windows(2) {
        assert!(w[1].color_error <= w[0].color_error + 1e-12);
        assert!(w[1].depth_error <= w[0].depth_error + 1e-12);
    }
}
