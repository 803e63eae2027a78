#include <doctest.h>

#include <cmath>
#include <random>

#include "upinn/nn.hpp"
#include "upinn/optim.hpp"

using namespace upinn;
using nn::Activation;
using nn::MLP;
using nn::MLPSpec;

namespace {

MLPSpec body(std::size_t in, std::vector<std::size_t> hidden, std::size_t out,
             Activation a = Activation::Tanh) {
  return {in, std::move(hidden), out, a, false};
}

MLPSpec head(std::size_t in, std::vector<std::size_t> hidden) {
  return {in, std::move(hidden), 1, Activation::Tanh, true};
}

double brute_count(const std::vector<std::size_t>& w) {
  double c = 0;
  for (std::size_t i = 0; i + 1 < w.size(); ++i) c += w[i] * w[i + 1] + w[i + 1];
  return c;
}

}  // namespace

TEST_CASE("parameter count") {
  const auto s = body(2, {64, 64, 64}, 64);
  // 2*64+64 + 2*(64*64+64) + 64*64+64
  CHECK(s.parameter_count() == 192 + 2 * 4160 + 4160);
  CHECK(s.parameter_count() == 12672);
  CHECK(static_cast<double>(s.parameter_count()) == brute_count(s.widths()));
  CHECK(init(s, 7).params().size() == 12672);
  CHECK_THROWS(body(2, {0}, 3).validate());
}

TEST_CASE("init is seeded and zero-biased") {
  const auto s = body(2, {16, 16}, 8);
  const auto a = nn::init(s, 7);
  const auto b = nn::init(s, 7);
  const auto c = nn::init(s, 8);
  CHECK(std::equal(a.params().begin(), a.params().end(), b.params().begin()));
  CHECK_FALSE(std::equal(a.params().begin(), a.params().end(), c.params().begin()));
  for (const auto& [name, values] : a.named_params()) {
    if (name.find("bias") != std::string::npos) {
      for (double v : values) CHECK(v == 0.0);
    }
  }
  CHECK(a.named_params().front().first == "layer0.weight");
}

TEST_CASE("forward examples") {
  MLP zero(body(3, {4}, 2));
  const double x[] = {0.5, -1.0, 2.0};
  for (double v : nn::forward(zero, x)) CHECK(v == 0.0);

  MLP id(MLPSpec{1, {}, 1, Activation::Tanh, true});
  id.params()[0] = 1.0;
  const double x1[] = {0.3};
  CHECK(nn::forward(id, x1)[0] == 0.3);

  MLP t(MLPSpec{1, {}, 1, Activation::Tanh, false});
  t.params()[0] = 1.0;
  const double x0[] = {0.0};
  CHECK(nn::forward(t, x0)[0] == 0.0);

  CHECK_THROWS_AS(nn::forward(zero, x1), DimensionError);
}

TEST_CASE("tanh body latent values lie in (-1, 1)") {
  nn::MultiHeadModel m;
  m.family = {0.02};
  m.groups.push_back({"y", nn::init(body(2, {64, 64, 64}, 64), 3), {nn::init(head(64, {32, 32}), 4)}});
  m.validate();
  const double x[] = {0.1, 0.02};
  const auto h = nn::latent(m, 0, x);
  CHECK(h.size() == 64);
  for (double v : h) {
    CHECK(v > -1.0);
    CHECK(v < 1.0);
  }
  CHECK(nn::latent(m, 0, x) == h);
}

TEST_CASE("model validation") {
  nn::MultiHeadModel m;
  m.family = {1.0, 2.0};
  m.groups.push_back({"x", nn::init(body(2, {4}, 3), 1), {nn::init(head(3, {2}), 2)}});
  CHECK_THROWS(m.validate());  // one head for two family values
  m.groups[0].heads.push_back(nn::init(head(4, {2}), 3));
  CHECK_THROWS(m.validate());  // head input != latent
  m.groups[0].heads[1] = nn::init(head(3, {2}), 3);
  CHECK_NOTHROW(m.validate());
}

TEST_CASE("composition equals end-to-end network") {
  const auto b = nn::init(body(2, {5, 5}, 4), 21);
  const auto h = nn::init(head(4, {3}), 22);
  MLP full(MLPSpec{2, {5, 5, 4, 3}, 1, Activation::Tanh, true});
  std::size_t k = 0;
  for (double v : b.params()) full.params()[k++] = v;
  for (double v : h.params()) full.params()[k++] = v;
  const double x[] = {0.2, -0.4};
  const auto lat = nn::forward(b, x);
  CHECK(std::abs(nn::forward(h, lat)[0] - nn::forward(full, x)[0]) < 1e-12);
}

TEST_CASE("head isolation") {
  nn::MultiHeadModel m;
  m.family = {1.0};
  m.groups.push_back({"x", nn::init(body(2, {4}, 3), 1), {nn::init(head(3, {2}), 2)}});
  const double x[] = {0.3, 0.1};
  const auto before = nn::forward(m.groups[0].heads[0], nn::latent(m, 0, x));
  m.family.push_back(2.0);
  m.groups[0].heads.push_back(nn::init(head(3, {2}), 9));
  const auto after = nn::forward(m.groups[0].heads[0], nn::latent(m, 0, x));
  CHECK(before == after);
}

TEST_CASE("freeze") {
  auto net = nn::init(body(2, {8}, 4), 5);
  nn::freeze(net);
  nn::freeze(net);
  CHECK(net.frozen());
  const std::vector<double> saved(net.params().begin(), net.params().end());
  std::vector<double> g(net.params().size(), 1.0);
  optim::Adam adam({});
  const optim::ParamGroup grp{net.params(), g, net.frozen()};
  for (int i = 0; i < 100; ++i) adam.step(std::span(&grp, 1));
  CHECK(std::equal(saved.begin(), saved.end(), net.params().begin()));
  CHECK(adam.moment_size(0) == 0);

  // input gradient of the frozen net against finite differences
  ad::Graph tape;
  const auto p = nn::lift_params(tape, net);
  ad::Var x[] = {tape.lift(0.4), tape.lift(-0.2)};
  const auto out = nn::forward(net, p, x);
  const auto gx = ad::grad(out[1], x);
  const double h = 1e-6;
  const double xp[] = {0.4 + h, -0.2};
  const double xm[] = {0.4 - h, -0.2};
  const double fd = (nn::forward(net, xp)[1] - nn::forward(net, xm)[1]) / (2 * h);
  CHECK(gx[0] != 0.0);
  CHECK(std::abs(gx[0] - fd) < 1e-8);
}

TEST_CASE("batched pass agrees with the scalar tape") {
  // values, input tangents, parameter gradients and input adjoints
  for (auto act : {Activation::Tanh, Activation::Silu}) {
    const auto net = nn::init(MLPSpec{2, {6, 5}, 3, act, false}, 31);
    std::mt19937_64 rng(2);
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    const std::size_t B = 4;
    nn::Matrix x(2, B);
    for (Eigen::Index i = 0; i < x.size(); ++i) x.data()[i] = u(rng);
    const std::size_t dirs[] = {0, 1};
    nn::BatchPass bp;
    const auto out = bp.forward(net, nn::Jet::seeded(x, dirs));

    // random adjoints for every output value and tangent
    nn::Jet adj(3, B, 2);
    for (Eigen::Index i = 0; i < adj.data.size(); ++i) adj.data.data()[i] = u(rng);
    std::vector<double> grad(net.params().size(), 0.0);
    const auto in_adj = bp.backward(net, adj, grad, true);

    ad::Graph g;
    const auto p = nn::lift_params(g, net);
    ad::Var loss = g.lift(0.0);
    std::vector<ad::Var> xs;
    for (std::size_t c = 0; c < B; ++c) {
      ad::Var xv[] = {g.lift(x(0, c)), g.lift(x(1, c))};
      xs.push_back(xv[0]);
      xs.push_back(xv[1]);
      const auto o = nn::forward(net, p, xv);
      for (std::size_t r = 0; r < 3; ++r) {
        CHECK(std::abs(o[r].value() - out.value()(r, c)) < 1e-13);
        const auto d = g.derivatives(o[r], xv);
        for (std::size_t k = 0; k < 2; ++k) {
          CHECK(std::abs(d[k].value() - out.tangent(k)(r, c)) < 1e-13);
          loss = loss + adj.tangent(k)(r, c) * d[k];
        }
        loss = loss + adj.value()(r, c) * o[r];
      }
    }
    const auto gp = ad::grad(loss, p);
    for (std::size_t i = 0; i < gp.size(); ++i) {
      CHECK(std::abs(gp[i] - grad[i]) < 1e-11);
    }
    const auto gx = ad::grad(loss, xs);
    for (std::size_t c = 0; c < B; ++c) {
      CHECK(std::abs(gx[2 * c] - in_adj.value()(0, c)) < 1e-11);
      CHECK(std::abs(gx[2 * c + 1] - in_adj.value()(1, c)) < 1e-11);
    }
  }
}

TEST_CASE("parameter hash tracks parameters") {
  auto a = nn::init(body(1, {3}, 2), 1);
  const auto h = nn::parameter_hash(a);
  CHECK(nn::parameter_hash(a) == h);
  a.params()[0] += 1e-12;
  CHECK(nn::parameter_hash(a) != h);
}

TEST_CASE("batched pass is bitwise independent of where parameters live") {
  const auto net = nn::init(body(2, {64, 33}, 17), 4);
  nn::Matrix x = nn::Matrix::Random(2, 50);
  const std::size_t dirs[] = {0, 1};
  nn::Jet adj(17, 50, 2);
  adj.data.setConstant(0.25);

  std::vector<std::vector<char>> pads;
  std::vector<MLP> copies;
  std::vector<std::vector<double>> ref;
  for (std::size_t k = 0; k < 8; ++k) {
    pads.emplace_back(8 * k + 8);
    copies.push_back(net);
    std::vector<double> grad(net.params().size(), 0.0);
    nn::BatchPass bp;
    const auto out = bp.forward(copies.back(), nn::Jet::seeded(x, dirs));
    const auto in = bp.backward(copies.back(), adj, grad, true);
    std::vector<double> all(out.data.data(), out.data.data() + out.data.size());
    all.insert(all.end(), in.data.data(), in.data.data() + in.data.size());
    all.insert(all.end(), grad.begin(), grad.end());
    if (ref.empty()) {
      ref.push_back(all);
    } else {
      CHECK(all == ref[0]);
    }
  }
}
