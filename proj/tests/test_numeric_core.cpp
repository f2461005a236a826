#include <doctest.h>

#include <cmath>
#include <limits>

#include "ralnet/gradcheck.hpp"
#include "ralnet/layers.hpp"
#include "ralnet/parallel.hpp"
#include "ralnet/rng.hpp"

using namespace ralnet;

namespace {

template <typename T>
Tensor<T> random_tensor(Shape s, std::uint64_t seed, double lo = -1.0, double hi = 1.0) {
  Rng rng(seed);
  Tensor<T> t(s);
  for (auto& v : t.vec()) v = static_cast<T>(rng.uniform(lo, hi));
  return t;
}

// Direct seven-loop cross-correlation with zero padding.
Tensor<double> conv_oracle(const Tensor<double>& x, const Tensor<double>& w, int stride, int pad) {
  const Shape xs = x.shape(), ws = w.shape();
  const int k = ws.h;
  const int oh = (xs.h + 2 * pad - k) / stride + 1;
  const int ow = (xs.w + 2 * pad - k) / stride + 1;
  Tensor<double> y(Shape{xs.n, ws.n, oh, ow});
  for (int n = 0; n < xs.n; ++n)
    for (int o = 0; o < ws.n; ++o)
      for (int i = 0; i < oh; ++i)
        for (int j = 0; j < ow; ++j) {
          double s = 0.0;
          for (int c = 0; c < xs.c; ++c)
            for (int a = 0; a < k; ++a)
              for (int b = 0; b < k; ++b) {
                const int yy = i * stride - pad + a, xx = j * stride - pad + b;
                if (yy < 0 || yy >= xs.h || xx < 0 || xx >= xs.w) continue;
                s += x.at(n, c, yy, xx) * w.at(o, c, a, b);
              }
          y.at(n, o, i, j) = s;
        }
  return y;
}

}  // namespace

TEST_CASE("tensor shape bookkeeping") {
  Tensor<float> t(Shape{2, 3, 4, 5});
  CHECK(t.size() == 120);
  CHECK(t.shape().per_item() == 60);
  CHECK_THROWS_AS(t.reshaped(Shape{2, 3, 4, 4}), std::invalid_argument);
  CHECK_THROWS_AS(Tensor<float>(Shape{1, 1, 1, 2}, std::vector<float>{1.0f}), std::invalid_argument);
  t[7] = std::numeric_limits<float>::quiet_NaN();
  CHECK_FALSE(t.all_finite());
  CHECK_THROWS_AS(t.require_finite("test"), NumericError);
}

TEST_CASE("conv2d identity kernel is the identity at stride 1") {
  Tensor<double> x(Shape{1, 1, 3, 3}, 1.0);
  Tensor<double> w(Shape{1, 1, 3, 3}, 0.0);
  w.at(0, 0, 1, 1) = 1.0;
  const Tensor<double> y = conv2d_forward(x, w, ConvSpec{1, 1});
  CHECK(y.shape() == x.shape());
  CHECK(y.vec() == x.vec());

  const Tensor<double> r = random_tensor<double>(Shape{2, 1, 7, 7}, 4);
  CHECK(conv2d_forward(r, w, ConvSpec{1, 1}).vec() == r.vec());
}

TEST_CASE("conv2d ramp with all-ones kernel at stride 2") {
  Tensor<double> x(Shape{1, 1, 4, 4});
  for (int i = 0; i < 16; ++i) x[i] = i;
  const Tensor<double> w(Shape{1, 1, 3, 3}, 1.0);
  const Tensor<double> y = conv2d_forward(x, w, ConvSpec{2, 1});
  REQUIRE(y.shape() == Shape{1, 1, 2, 2});
  // Hand sums of the padded 3x3 windows centred at (0,0), (0,2), (2,0), (2,2).
  CHECK(y[0] == doctest::Approx(0 + 1 + 4 + 5));
  CHECK(y[1] == doctest::Approx(1 + 2 + 3 + 5 + 6 + 7));
  CHECK(y[2] == doctest::Approx(4 + 5 + 8 + 9 + 12 + 13));
  CHECK(y[3] == doctest::Approx(5 + 6 + 7 + 9 + 10 + 11 + 13 + 14 + 15));
  CHECK(y.vec() == conv_oracle(x, w, 2, 1).vec());
}

TEST_CASE("conv2d matches the direct loop oracle") {
  for (auto [stride, pad, k] : {std::tuple{1, 1, 3}, std::tuple{2, 1, 3}, std::tuple{1, 0, 8}, std::tuple{2, 0, 3}}) {
    const Tensor<double> x = random_tensor<double>(Shape{3, 2, 9, 9}, 10 + stride + k);
    const Tensor<double> w = random_tensor<double>(Shape{4, 2, k, k}, 20 + pad);
    const Tensor<double> y = conv2d_forward(x, w, ConvSpec{stride, pad});
    const Tensor<double> ref = conv_oracle(x, w, stride, pad);
    REQUIRE(y.shape() == ref.shape());
    for (std::size_t i = 0; i < y.size(); ++i) CHECK(y[i] == doctest::Approx(ref[i]).epsilon(1e-12));
  }
}

TEST_CASE("conv2d shape errors name both shapes") {
  const Tensor<float> x(Shape{1, 2, 4, 4});
  const Tensor<float> w(Shape{1, 3, 3, 3});
  try {
    conv2d_forward(x, w, ConvSpec{1, 1});
    FAIL("expected an error");
  } catch (const std::invalid_argument& e) {
    const std::string msg = e.what();
    CHECK(msg.find(x.shape().str()) != std::string::npos);
    CHECK(msg.find(w.shape().str()) != std::string::npos);
  }
  CHECK_THROWS_AS(conv2d_forward(Tensor<float>(Shape{1, 1, 2, 2}), Tensor<float>(Shape{1, 1, 8, 8}), ConvSpec{1, 0}),
                  std::invalid_argument);
}

TEST_CASE("conv2d backward accumulates into the weight gradient") {
  const Tensor<double> x = random_tensor<double>(Shape{2, 2, 5, 5}, 1);
  ParamBuffer<double> w("w", random_tensor<double>(Shape{3, 2, 3, 3}, 2));
  const Tensor<double> g = random_tensor<double>(Shape{2, 3, 5, 5}, 3);
  conv2d_backward(x, w, ConvSpec{1, 1}, g);
  const Tensor<double> once = w.grad;
  conv2d_backward(x, w, ConvSpec{1, 1}, g);
  for (std::size_t i = 0; i < once.size(); ++i) CHECK(w.grad[i] == doctest::Approx(2.0 * once[i]));
  w.zero_grad();
  for (double v : w.grad.vec()) CHECK(v == 0.0);
}

TEST_CASE("batch norm hand cases") {
  SUBCASE("constant channel gives zeros") {
    Tensor<double> x(Shape{3, 1, 2, 2}, 5.0);
    BatchNormState<double> st(1);
    const Tensor<double> y = batch_norm_forward(x, st, Mode::Train, static_cast<BatchNormCache<double>*>(nullptr));
    for (double v : y.vec()) CHECK(v == 0.0);
  }
  SUBCASE("values 1 and 3 map to -1 and +1") {
    Tensor<double> x(Shape{2, 1, 1, 1});
    x[0] = 1.0;
    x[1] = 3.0;
    BatchNormState<double> st(1);
    st.eps = 0.0;
    const Tensor<double> y = batch_norm_forward(x, st, Mode::Train, static_cast<BatchNormCache<double>*>(nullptr));
    CHECK(y[0] == doctest::Approx(-1.0).epsilon(1e-15));
    CHECK(y[1] == doctest::Approx(1.0).epsilon(1e-15));
    // Running stats: momentum 0.1 towards mean 2 and unbiased variance 2.
    CHECK(st.running_mean[0] == doctest::Approx(0.2));
    CHECK(st.running_var[0] == doctest::Approx(0.9 * 1.0 + 0.1 * 2.0));
  }
  SUBCASE("batch of one in train mode is rejected") {
    Tensor<float> x(Shape{1, 2, 3, 3}, 1.0f);
    BatchNormState<float> st(2);
    CHECK_THROWS(batch_norm_forward(x, st, Mode::Train, static_cast<BatchNormCache<float>*>(nullptr)));
  }
  SUBCASE("eval mode uses running statistics") {
    Tensor<double> x(Shape{1, 1, 1, 2});
    x[0] = 3.0;
    x[1] = -1.0;
    BatchNormState<double> st(1);
    st.running_mean[0] = 1.0;
    st.running_var[0] = 4.0 - st.eps;
    const Tensor<double> y = batch_norm_infer(x, st);
    CHECK(y[0] == doctest::Approx(1.0));
    CHECK(y[1] == doctest::Approx(-1.0));
  }
}

TEST_CASE("relu, dropout and l2 normalize hand cases") {
  Tensor<double> x(matrix_shape(1, 4));
  x[0] = -1.0;
  x[1] = 0.0;
  x[2] = 2.0;
  x[3] = -0.5;
  const Tensor<double> r = relu_forward(x);
  CHECK(r.vec() == std::vector<double>{0.0, 0.0, 2.0, 0.0});

  Rng rng(1);
  const Tensor<double> big = random_tensor<double>(Shape{4, 3, 5, 5}, 9);
  Tensor<double> mask;
  CHECK(dropout_forward(big, 0.0, rng, Mode::Train, &mask).vec() == big.vec());
  CHECK(dropout_forward(big, 0.0, rng, Mode::Eval, &mask).vec() == big.vec());
  CHECK(dropout_forward(big, 0.5, rng, Mode::Eval, &mask).vec() == big.vec());

  const Tensor<double> dropped = dropout_forward(big, 0.3, rng, Mode::Train, &mask);
  for (std::size_t i = 0; i < big.size(); ++i) {
    CHECK((dropped[i] == 0.0 || dropped[i] == doctest::Approx(big[i] / 0.7)));
  }

  Tensor<double> v(matrix_shape(1, 2));
  v[0] = 3.0;
  v[1] = 4.0;
  const Tensor<double> n = l2_normalize_rows_forward(v);
  CHECK(n[0] == doctest::Approx(0.6));
  CHECK(n[1] == doctest::Approx(0.8));

  CHECK_THROWS_AS(l2_normalize_rows_forward(Tensor<double>(matrix_shape(2, 3), 0.0)), NumericError);
}

TEST_CASE("l2 normalize rows: unit norm and idempotent") {
  const Tensor<float> x = random_tensor<float>(matrix_shape(50, 128), 17, -3.0, 3.0);
  const Tensor<float> y = l2_normalize_rows_forward(x);
  const Tensor<float> z = l2_normalize_rows_forward(y);
  for (int r = 0; r < 50; ++r) {
    double s = 0.0;
    for (float v : y.item(r)) s += static_cast<double>(v) * v;
    CHECK(std::abs(std::sqrt(s) - 1.0) < 1e-6);
  }
  for (std::size_t i = 0; i < y.size(); ++i) CHECK(std::abs(y[i] - z[i]) < 1e-6);
}

TEST_CASE("matmul hand cases and errors") {
  Tensor<double> a(matrix_shape(2, 2), std::vector<double>{1, 2, 3, 4});
  Tensor<double> id(matrix_shape(2, 2), std::vector<double>{1, 0, 0, 1});
  CHECK(matmul_abt(a, id).vec() == a.vec());
  CHECK(matmul_abt(id, id).vec() == id.vec());
  CHECK_THROWS_AS(matmul_abt(a, Tensor<double>(matrix_shape(2, 3))), std::invalid_argument);
}

TEST_CASE("sgd step") {
  SUBCASE("lr 0 leaves weights unchanged") {
    ParamBuffer<float> p("p", random_tensor<float>(Shape{2, 3, 3, 3}, 5));
    const auto before = p.value.vec();
    for (auto& g : p.grad.vec()) g = 0.25f;
    ParamBuffer<float>* list[] = {&p};
    sgd_step<float>(list, 0.0, 0.9, 1e-4);
    CHECK(p.value.vec() == before);
  }
  SUBCASE("scalar step") {
    ParamBuffer<double> p("w", Tensor<double>(matrix_shape(1, 1), 1.0));
    p.grad[0] = 1.0;
    ParamBuffer<double>* list[] = {&p};
    sgd_step<double>(list, 0.5, 0.0, 0.0);
    CHECK(p.value[0] == 0.5);
  }
  SUBCASE("two-step momentum trajectory") {
    // w0 = 1, g = 2 both steps, mu = 0.9, wd = 0.1, lr = 0.1.
    // v1 = 2 + 0.1 = 2.1, w1 = 1 - 0.21 = 0.79
    // v2 = 0.9 * 2.1 + 2 + 0.079 = 3.969, w2 = 0.79 - 0.3969 = 0.3931
    ParamBuffer<double> p("w", Tensor<double>(matrix_shape(1, 1), 1.0));
    ParamBuffer<double>* list[] = {&p};
    p.grad[0] = 2.0;
    sgd_step<double>(list, 0.1, 0.9, 0.1);
    CHECK(p.velocity[0] == doctest::Approx(2.1).epsilon(1e-14));
    CHECK(p.value[0] == doctest::Approx(0.79).epsilon(1e-14));
    sgd_step<double>(list, 0.1, 0.9, 0.1);
    CHECK(p.velocity[0] == doctest::Approx(3.969).epsilon(1e-14));
    CHECK(p.value[0] == doctest::Approx(0.3931).epsilon(1e-14));
  }
  SUBCASE("decay-exempt parameters skip weight decay") {
    ParamBuffer<double> p("stat", Tensor<double>(matrix_shape(1, 1), 3.0), true);
    ParamBuffer<double>* list[] = {&p};
    sgd_step<double>(list, 1.0, 0.0, 0.5);
    CHECK(p.value[0] == 3.0);
  }
  SUBCASE("non-finite gradient aborts with the parameter name") {
    ParamBuffer<float> p("conv3", Tensor<float>(matrix_shape(1, 2), 1.0f));
    p.grad[1] = std::numeric_limits<float>::infinity();
    ParamBuffer<float>* list[] = {&p};
    try {
      sgd_step<float>(list, 0.1, 0.9, 0.0);
      FAIL("expected NumericError");
    } catch (const NumericError& e) {
      CHECK(std::string(e.what()).find("conv3") != std::string::npos);
    }
    CHECK(p.value[0] == 1.0f);
  }
}

TEST_CASE("layer gradients match finite differences") {
  const auto cases = run_gradcheck(11);
  for (const auto& c : cases) {
    INFO(c.name << " error " << c.max_rel_error);
    CHECK(c.pass());
  }
}

TEST_CASE("l2 normalize backward against an explicit Jacobian") {
  const Tensor<double> x = random_tensor<double>(matrix_shape(5, 8), 23);
  std::vector<double> norms;
  const Tensor<double> y = l2_normalize_rows_forward(x, &norms);
  const Tensor<double> u = random_tensor<double>(y.shape(), 24);
  const Tensor<double> g = l2_normalize_rows_backward(y, std::span<const double>(norms), u);
  for (int r = 0; r < 5; ++r) {
    // J = (I - y y^T) / |x|
    for (int i = 0; i < 8; ++i) {
      double s = 0.0;
      for (int j = 0; j < 8; ++j) s += ((i == j ? 1.0 : 0.0) - y.at(r, i) * y.at(r, j)) / norms[r] * u.at(r, j);
      CHECK(g.at(r, i) == doctest::Approx(s).epsilon(1e-12));
    }
  }
}

TEST_CASE("deterministic mode gives bitwise-identical conv results for any thread count") {
  const Tensor<float> x = random_tensor<float>(Shape{37, 3, 12, 12}, 31);
  const Tensor<float> w = random_tensor<float>(Shape{5, 3, 3, 3}, 32);
  const Tensor<float> g = random_tensor<float>(Shape{37, 5, 12, 12}, 33);
  set_deterministic(true);
  std::vector<std::vector<float>> grads;
  for (int threads : {1, 3, 4}) {
    set_num_threads(threads);
    ParamBuffer<float> p("w", w);
    conv2d_forward(x, w, ConvSpec{1, 1});
    conv2d_backward(x, p, ConvSpec{1, 1}, g);
    grads.push_back(p.grad.vec());
  }
  set_num_threads(0);
  CHECK(grads[0] == grads[1]);
  CHECK(grads[0] == grads[2]);
}

TEST_CASE("rng streams are reproducible") {
  Rng a(42), b(42);
  for (int i = 0; i < 100; ++i) CHECK(a.uniform() == b.uniform());
  Rng c(7);
  for (int i = 0; i < 1000; ++i) {
    const auto v = c.below(5);
    CHECK(v < 5);
  }
  double sum = 0.0, sq = 0.0;
  Rng d(8);
  for (int i = 0; i < 20000; ++i) {
    const double z = d.normal();
    sum += z;
    sq += z * z;
  }
  CHECK(std::abs(sum / 20000) < 0.05);
  CHECK(std::abs(sq / 20000 - 1.0) < 0.05);
}
