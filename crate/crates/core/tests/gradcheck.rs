//! Reverse-mode gradients against central finite differences.

#[path = "common/grad_oracles.rs"]
mod grad_oracles;

#[test]
fn elementwise_binary() {
    grad_oracles::elementwise_binary();
}

#[test]
fn add_bias() {
    grad_oracles::add_bias();
}

#[test]
fn elementwise_unary() {
    grad_oracles::elementwise_unary();
}

#[test]
fn matmul_and_linear() {
    grad_oracles::matmul_and_linear();
}

#[test]
fn convolutions() {
    grad_oracles::convolutions();
}

#[test]
fn batch_norm_modes() {
    grad_oracles::batch_norm_modes();
}

#[test]
fn softmax_family_and_losses() {
    grad_oracles::softmax_family_and_losses();
}

#[test]
fn reductions_and_reshapes() {
    grad_oracles::reductions_and_reshapes();
}

#[test]
fn composite_pipeline() {
    grad_oracles::composite_pipeline();
}
