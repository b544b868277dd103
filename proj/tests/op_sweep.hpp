#pragma once

// Finite-difference sweep over every differentiable op, shared by the unit
// suite and the acceptance runner. Inputs are fixed-seed random, spatial
// extents at most 8x8, relu inputs kept away from the kink.

#include <string>
#include <vector>

#include "dpc/graph.hpp"
#include "dpc/random.hpp"

namespace dpc_tests {

struct OpCheck {
    std::string name;
    dpc::GradCheckReport report;
};

inline dpc::Tensor away_from_zero(dpc::RandomStream& rng, std::vector<int> shape) {
    dpc::Tensor t(std::move(shape));
    for (double& v : t.data) {
        double m = rng.uniform(0.2, 1.2);
        v = rng.uniform() < 0.5 ? -m : m;
    }
    return t;
}

inline std::vector<OpCheck> run_op_gradient_sweep(double tol = 1e-4) {
    using namespace dpc;
    RandomStream rng(20240915);
    std::vector<OpCheck> out;

    auto project = [](Graph& g, Value v, std::uint64_t seed) {
        RandomStream r(seed);
        Tensor w(g.val(v).shape);
        r.fill_uniform(w, -1.0, 1.0);
        return sum_all(g, mul(g, v, g.leaf(std::move(w))));
    };

    auto check = [&](const char* name, const ScalarBuilder& fn, std::vector<Tensor> inputs) {
        out.push_back({name, gradient_check(fn, inputs, tol)});
    };

    check("conv2d_s1",
          [&](Graph& g, const std::vector<Value>& v) {
              return project(g, conv2d(g, v[0], v[1], v[2], 1, 1), 1);
          },
          {rng.uniform_tensor({1, 2, 6, 6}, -1, 1), rng.uniform_tensor({3, 2, 3, 3}, -1, 1),
           rng.uniform_tensor({3}, -0.5, 0.5)});

    check("conv2d_s2",
          [&](Graph& g, const std::vector<Value>& v) {
              return project(g, conv2d(g, v[0], v[1], v[2], 2, 2), 2);
          },
          {rng.uniform_tensor({1, 2, 7, 7}, -1, 1), rng.uniform_tensor({2, 2, 5, 5}, -1, 1),
           rng.uniform_tensor({2}, -0.5, 0.5)});

    check("conv2d_transpose_s1",
          [&](Graph& g, const std::vector<Value>& v) {
              return project(g, conv2d_transpose(g, v[0], v[1], v[2], 1, 1), 3);
          },
          {rng.uniform_tensor({1, 2, 4, 4}, -1, 1), rng.uniform_tensor({2, 3, 3, 3}, -1, 1),
           rng.uniform_tensor({3}, -0.5, 0.5)});

    check("conv2d_transpose_s2",
          [&](Graph& g, const std::vector<Value>& v) {
              return project(g, conv2d_transpose(g, v[0], v[1], v[2], 2, 1), 4);
          },
          {rng.uniform_tensor({1, 2, 4, 4}, -1, 1), rng.uniform_tensor({2, 3, 4, 4}, -1, 1),
           rng.uniform_tensor({3}, -0.5, 0.5)});

    check("relu",
          [&](Graph& g, const std::vector<Value>& v) { return project(g, relu(g, v[0]), 5); },
          {away_from_zero(rng, {2, 3, 4, 4})});

    check("silu",
          [&](Graph& g, const std::vector<Value>& v) { return project(g, silu(g, v[0]), 6); },
          {rng.uniform_tensor({2, 3, 4, 4}, -2, 2)});

    check("sigmoid",
          [&](Graph& g, const std::vector<Value>& v) { return project(g, sigmoid(g, v[0]), 7); },
          {rng.uniform_tensor({2, 8}, -2, 2)});

    check("softplus",
          [&](Graph& g, const std::vector<Value>& v) { return project(g, softplus(g, v[0]), 8); },
          {rng.uniform_tensor({2, 8}, -2, 2)});

    check("group_norm",
          [&](Graph& g, const std::vector<Value>& v) {
              return project(g, group_norm(g, v[0], v[1], v[2], 2), 9);
          },
          {rng.uniform_tensor({2, 4, 3, 3}, -1, 1), rng.uniform_tensor({4}, 0.5, 1.5),
           rng.uniform_tensor({4}, -0.5, 0.5)});

    check("self_attention",
          [&](Graph& g, const std::vector<Value>& v) {
              return project(g, self_attention(g, v[0], v[1], v[2], v[3], v[4]), 10);
          },
          {rng.uniform_tensor({1, 3, 2, 2}, -1, 1), rng.uniform_tensor({3, 3}, -0.6, 0.6),
           rng.uniform_tensor({3, 3}, -0.6, 0.6), rng.uniform_tensor({3, 3}, -0.6, 0.6),
           rng.uniform_tensor({3, 3}, -0.6, 0.6)});

    check("linear",
          [&](Graph& g, const std::vector<Value>& v) {
              return project(g, linear(g, v[0], v[1], v[2]), 11);
          },
          {rng.uniform_tensor({2, 3}, -1, 1), rng.uniform_tensor({4, 3}, -1, 1),
           rng.uniform_tensor({4}, -0.5, 0.5)});

    check("add_sample_channel_bias",
          [&](Graph& g, const std::vector<Value>& v) {
              return project(g, add_sample_channel_bias(g, v[0], v[1]), 12);
          },
          {rng.uniform_tensor({2, 3, 3, 3}, -1, 1), rng.uniform_tensor({2, 3}, -1, 1)});

    check("scale_per_sample",
          [&](Graph& g, const std::vector<Value>& v) {
              return project(g, scale_per_sample(g, v[0], {0.7, -1.3}), 13);
          },
          {rng.uniform_tensor({2, 3, 2, 2}, -1, 1)});

    check("channel_unit_normalize",
          [&](Graph& g, const std::vector<Value>& v) {
              return project(g, channel_unit_normalize(g, v[0]), 14);
          },
          {rng.uniform_tensor({1, 3, 2, 2}, -1, 1)});

    check("concat_slice",
          [&](Graph& g, const std::vector<Value>& v) {
              Value cat = concat_channels(g, v[0], v[1]);
              return project(g, slice_channels(g, cat, 1, 4), 15);
          },
          {rng.uniform_tensor({1, 2, 3, 3}, -1, 1), rng.uniform_tensor({1, 3, 3, 3}, -1, 1)});

    check("arith_mix",
          [&](Graph& g, const std::vector<Value>& v) {
              Value s = add(g, scale(g, v[0], 1.7), add_scalar(g, v[1], 0.3));
              Value m = mul(g, s, sub(g, v[0], v[1]));
              return add(g, mean_all(g, m), scale(g, sum_all(g, s), 0.01));
          },
          {rng.uniform_tensor({2, 5}, -1, 1), rng.uniform_tensor({2, 5}, -1, 1)});

    check("mse",
          [&](Graph& g, const std::vector<Value>& v) { return mse(g, v[0], v[1]); },
          {rng.uniform_tensor({2, 3, 4, 4}, -1, 1), rng.uniform_tensor({2, 3, 4, 4}, -1, 1)});

    check("gaussian_bits",
          [&](Graph& g, const std::vector<Value>& v) {
              Value sigma = add_scalar(g, softplus(g, v[2]), 0.11);
              return gaussian_bits(g, v[0], v[1], sigma);
          },
          {rng.uniform_tensor({1, 2, 3, 3}, -2, 2), rng.uniform_tensor({1, 2, 3, 3}, -1, 1),
           rng.uniform_tensor({1, 2, 3, 3}, -1, 1)});

    check("logistic_bits",
          [&](Graph& g, const std::vector<Value>& v) {
              return logistic_bits(g, v[0], v[1], v[2]);
          },
          {rng.uniform_tensor({1, 3, 2, 2}, -2, 2), rng.uniform_tensor({3}, -0.5, 0.5),
           rng.uniform_tensor({3}, -0.5, 0.5)});

    return out;
}

}  // namespace dpc_tests
