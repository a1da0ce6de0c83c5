#[test]
fn fixtures_match_the_default_scene() {
    let scene = hsicd_bench::scene();
    assert_eq!(scene.pair.time1().bands(), 32);
    let pair = hsicd_bench::affinity(&scene);
    assert_eq!(pair.pixel_count(), 64 * 64);
    assert_eq!(pair.layout().size(), 40);
}
