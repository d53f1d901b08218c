use jbsde_bench::Fixture;

#[test]
fn fixtures_are_consistent() {
    for f in [Fixture::linear(0.0, 8, 20), Fixture::linear(0.5, 4, 10), Fixture::nonlocal(8, 20)] {
        f.model.check_dims().unwrap();
        assert_eq!(f.measure.dim_e(), f.model.dims.marks);
    }
    assert!(Fixture::nonlocal(8, 20).model.needs_nonlocal());
}
