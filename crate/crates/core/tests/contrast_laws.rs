mod common;

#[test]
fn set_difference_and_provenance_totality() {
    common::laws::contrast_laws(500, 0x5eed);
}
