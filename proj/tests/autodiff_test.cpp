#include <cmath>
#include <random>
#include <vector>

#include "doctest.h"
#include "maskdiff/autodiff.hpp"
#include "maskdiff/kernels.hpp"
#include "maskdiff/verify.hpp"

using namespace maskdiff;
namespace kn = maskdiff::kernels;

namespace {

std::vector<double> random_vec(std::size_t n, std::mt19937_64& rng) {
  std::normal_distribution<double> d;
  std::vector<double> v(n);
  for (auto& x : v) x = d(rng);
  return v;
}

double max_abs_diff(const std::vector<double>& a, const std::vector<double>& b) {
  REQUIRE(a.size() == b.size());
  double m = 0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

Tensor<double> random_tensor(Shape s, std::mt19937_64& rng) {
  const auto n = numel(s);
  return Tensor<double>(std::move(s), random_vec(n, rng));
}

}  // namespace

TEST_SUITE("kernels") {

TEST_CASE("conv2d matches the direct loops") {
  std::mt19937_64 rng(1);
  struct Case {
    std::size_t batch, cin, cout, hw, k, stride, pad;
  };
  // The last case is large enough to take the one-sample-per-chunk path.
  for (const Case c : {Case{2, 3, 4, 5, 3, 1, 1}, Case{3, 2, 5, 8, 3, 2, 1}, Case{2, 4, 3, 6, 1, 1, 0},
                       Case{1, 1, 1, 7, 3, 1, 0}, Case{2, 32, 8, 32, 3, 1, 1}}) {
    kn::ConvGeometry g;
    g.batch = c.batch;
    g.in_channels = c.cin;
    g.out_channels = c.cout;
    g.height = g.width = c.hw;
    g.kernel_h = g.kernel_w = c.k;
    g.stride = c.stride;
    g.padding = c.pad;
    const auto x = random_vec(g.batch * c.cin * c.hw * c.hw, rng);
    const auto w = random_vec(c.cout * g.patch_size(), rng);
    const auto b = random_vec(c.cout, rng);
    const std::size_t ny = g.batch * c.cout * g.out_height() * g.out_width();
    std::vector<double> y(ny), y_ref(ny);
    kn::conv2d_forward(x.data(), w.data(), b.data(), y.data(), g);
    kn::reference::conv2d_forward(x.data(), w.data(), b.data(), y_ref.data(), g);
    CHECK(max_abs_diff(y, y_ref) < 1e-10);

    const auto dy = random_vec(ny, rng);
    std::vector<double> dx(x.size()), dw(w.size()), db(b.size());
    std::vector<double> dx_ref(x.size()), dw_ref(w.size()), db_ref(b.size());
    kn::conv2d_backward(x.data(), w.data(), dy.data(), dx.data(), dw.data(), db.data(), g);
    kn::reference::conv2d_backward(x.data(), w.data(), dy.data(), dx_ref.data(), dw_ref.data(), db_ref.data(), g);
    CHECK(max_abs_diff(dx, dx_ref) < 1e-9);
    CHECK(max_abs_diff(dw, dw_ref) < 1e-9);
    CHECK(max_abs_diff(db, db_ref) < 1e-9);
  }
}

TEST_CASE("group norm matches the direct loops") {
  std::mt19937_64 rng(2);
  kn::NormGeometry g{3, 8, 20, 4};
  const auto x = random_vec(g.batch * g.channels * g.spatial, rng);
  const auto gamma = random_vec(g.channels, rng), beta = random_vec(g.channels, rng);
  std::vector<double> y(x.size()), y_ref(x.size()), m(12), r(12), m_ref(12), r_ref(12);
  kn::group_norm_forward(x.data(), gamma.data(), beta.data(), y.data(), m.data(), r.data(), g, 1e-5);
  kn::reference::group_norm_forward(x.data(), gamma.data(), beta.data(), y_ref.data(), m_ref.data(), r_ref.data(), g,
                                    1e-5);
  CHECK(max_abs_diff(y, y_ref) < 1e-12);
  const auto dy = random_vec(x.size(), rng);
  std::vector<double> dx(x.size()), dg(8), db(8), dx_ref(x.size()), dg_ref(8), db_ref(8);
  kn::group_norm_backward(x.data(), gamma.data(), m.data(), r.data(), dy.data(), dx.data(), dg.data(), db.data(), g);
  kn::reference::group_norm_backward(x.data(), gamma.data(), m_ref.data(), r_ref.data(), dy.data(), dx_ref.data(),
                                     dg_ref.data(), db_ref.data(), g);
  CHECK(max_abs_diff(dx, dx_ref) < 1e-10);
  CHECK(max_abs_diff(dg, dg_ref) < 1e-10);
  CHECK(max_abs_diff(db, db_ref) < 1e-10);
}

TEST_CASE("attention and matmul match the direct loops") {
  std::mt19937_64 rng(3);
  const std::size_t B = 2, C = 4, L = 9;
  const auto q = random_vec(B * C * L, rng), k = random_vec(B * C * L, rng), v = random_vec(B * C * L, rng);
  std::vector<double> o(B * C * L), o_ref(B * C * L), p(B * L * L), p_ref(B * L * L);
  kn::attention_forward(q.data(), k.data(), v.data(), o.data(), p.data(), B, C, L);
  kn::reference::attention_forward(q.data(), k.data(), v.data(), o_ref.data(), p_ref.data(), B, C, L);
  CHECK(max_abs_diff(o, o_ref) < 1e-12);
  CHECK(max_abs_diff(p, p_ref) < 1e-12);
  const auto d = random_vec(B * C * L, rng);
  std::vector<double> dq(q.size()), dk(q.size()), dv(q.size()), dq_ref(q.size()), dk_ref(q.size()), dv_ref(q.size());
  kn::attention_backward(q.data(), k.data(), v.data(), p.data(), d.data(), dq.data(), dk.data(), dv.data(), B, C, L);
  kn::reference::attention_backward(q.data(), k.data(), v.data(), p.data(), d.data(), dq_ref.data(), dk_ref.data(),
                                    dv_ref.data(), B, C, L);
  CHECK(max_abs_diff(dq, dq_ref) < 1e-12);
  CHECK(max_abs_diff(dk, dk_ref) < 1e-12);
  CHECK(max_abs_diff(dv, dv_ref) < 1e-12);

  const auto a = random_vec(5 * 7, rng), b = random_vec(7 * 3, rng);
  std::vector<double> c(15, 1.0), c_ref(15, 1.0);
  kn::matmul(a.data(), b.data(), c.data(), 5, 7, 3, true);
  kn::reference::matmul(a.data(), b.data(), c_ref.data(), 5, 7, 3, true);
  CHECK(max_abs_diff(c, c_ref) < 1e-12);
  const auto dc = random_vec(15, rng);
  std::vector<double> da(a.size()), dbm(b.size()), da_ref(a.size()), db_ref(b.size());
  kn::matmul_backward(a.data(), b.data(), dc.data(), da.data(), dbm.data(), 5, 7, 3);
  kn::reference::matmul_backward(a.data(), b.data(), dc.data(), da_ref.data(), db_ref.data(), 5, 7, 3);
  CHECK(max_abs_diff(da, da_ref) < 1e-12);
  CHECK(max_abs_diff(dbm, db_ref) < 1e-12);
}

}  // TEST_SUITE

TEST_SUITE("autodiff") {

TEST_CASE("1x1 identity kernel reproduces its input") {
  std::mt19937_64 rng(4);
  const auto x = random_tensor({2, 3, 4, 5}, rng);
  Tensor<double> w(Shape{3, 3, 1, 1});
  for (std::size_t c = 0; c < 3; ++c) w[c * 3 + c] = 1.0;
  const auto y = ad::conv2d(ad::constant(x), ad::constant(w), ad::Var<double>{}, 1, 0);
  CHECK(y.value() == x);
}

TEST_CASE("gradient of sum(x*x) is 2x") {
  std::mt19937_64 rng(5);
  ad::Tape<double> tape;
  const auto x0 = random_tensor({3, 4}, rng);
  auto x = tape.leaf(x0);
  auto loss = ad::sum(ad::mul(x, x));
  tape.backward(loss);
  for (std::size_t i = 0; i < x0.size(); ++i) CHECK(x.grad()[i] == 2 * x0[i]);
}

TEST_CASE("constants never receive gradient") {
  ad::Tape<double> tape;
  auto c = ad::constant(Tensor<double>(Shape{2}, 3.0));
  auto x = tape.leaf(Tensor<double>(Shape{2}, 1.0));
  tape.backward(ad::sum(ad::mul(c, x)));
  CHECK(c.grad().empty());
  CHECK_FALSE(c.recorded());
  CHECK(x.grad()[0] == 3.0);
}

TEST_CASE("backward rejects non-scalar roots and unrecorded values") {
  ad::Tape<double> tape;
  auto x = tape.leaf(Tensor<double>(Shape{2}, 1.0));
  CHECK_THROWS_AS(tape.backward(ad::add(x, x)), ShapeError);
  CHECK_THROWS_AS(tape.backward(ad::constant(Tensor<double>::scalar(1.0))), std::logic_error);
}

TEST_CASE("shape errors") {
  CHECK_THROWS_AS(Tensor<float>(Shape{2, 0}), ShapeError);
  CHECK_THROWS_AS(Tensor<float>(Shape{2, 2}, std::vector<float>(3)), ShapeError);
  auto a = ad::constant(Tensor<double>(Shape{2, 3}));
  auto b = ad::constant(Tensor<double>(Shape{3, 2}));
  CHECK_THROWS_AS(ad::add(a, b), ShapeError);
  CHECK_THROWS_AS(ad::matmul(a, a), ShapeError);
  CHECK_THROWS_AS(ad::avg_pool2(ad::constant(Tensor<double>(Shape{1, 1, 3, 3}))), ShapeError);
  CHECK_THROWS_AS(ad::group_norm(ad::constant(Tensor<double>(Shape{1, 6, 2, 2})), 4,
                                 ad::constant(Tensor<double>(Shape{6})), ad::constant(Tensor<double>(Shape{6}))),
                  ShapeError);
}

TEST_CASE("five-parameter MLP gradient against central differences") {
  // y = sum(silu(w1 * x + b1) * w2) with w1 [2,1], b1 [2], w2 [2] gives five scalars.
  std::mt19937_64 rng(6);
  const auto x = random_tensor({3, 1}, rng);
  const verify::ScalarFn f = [&x](const std::vector<ad::Var<double>>& p) {
    auto h = ad::silu(ad::linear(ad::constant(x), p[0], p[1]));
    Tensor<double> ones(Shape{3, 1}, 1.0);
    auto out = ad::matmul(h, ad::reshape(p[2], {2, 1}));
    return ad::sum(ad::mul(out, ad::constant(ones)));
  };
  const auto r = verify::gradient_check("mlp", f, {random_tensor({2, 1}, rng), random_tensor({2}, rng),
                                                  random_tensor({2}, rng)});
  CHECK_MESSAGE(r.pass, r.detail);
  CHECK(r.value < 1e-4);
}

TEST_CASE("every primitive passes the gradient check") {
  std::mt19937_64 rng(7);
  for (const auto& r : verify::primitive_gradient_suite(rng)) CHECK_MESSAGE(r.pass, r.name << ": " << r.detail);
}

TEST_CASE("backward is linear in the loss") {
  std::mt19937_64 rng(8);
  const auto x0 = random_tensor({2, 3, 4, 4}, rng);
  const auto w0 = random_tensor({3, 3, 3, 3}, rng);
  auto grads = [&](double a, double b) {
    ad::Tape<double> tape;
    auto x = tape.leaf(x0);
    auto w = tape.leaf(w0);
    auto y = ad::conv2d(x, w, ad::Var<double>{}, 1, 1);
    auto f = ad::sum(ad::mul(y, y));
    auto g = ad::sum(ad::silu(y));
    tape.backward(ad::add(ad::scale(f, a), ad::scale(g, b)));
    return std::vector<double>(w.grad().values().begin(), w.grad().values().end());
  };
  const auto gf = grads(1, 0), gg = grads(0, 1), mix = grads(2.5, -0.75);
  for (std::size_t i = 0; i < mix.size(); ++i) {
    CHECK(mix[i] == doctest::Approx(2.5 * gf[i] - 0.75 * gg[i]).epsilon(1e-10));
  }
}

TEST_CASE("repeated forward and backward are bit-identical") {
  std::mt19937_64 rng(9);
  const auto x0 = random_tensor({2, 4, 8, 8}, rng);
  const auto g0 = random_tensor({4}, rng), b0 = random_tensor({4}, rng);
  auto run = [&] {
    ad::Tape<double> tape;
    auto x = tape.leaf(x0);
    auto h = ad::group_norm(x, 2, ad::constant(g0), ad::constant(b0));
    auto a = ad::softmax_attention(h, h, h);
    auto loss = ad::sum(ad::mul(a, a));
    tape.backward(loss);
    return std::make_pair(loss.value().item(), x.grad());
  };
  const auto first = run();
  for (int i = 0; i < 3; ++i) {
    const auto again = run();
    CHECK(again.first == first.first);
    CHECK(again.second == first.second);
  }
}

}  // TEST_SUITE
