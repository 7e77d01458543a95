#include "unionret/gradsuite.hpp"

#include <array>
#include <chrono>

#include "unionret/model.hpp"
#include "unionret/objective.hpp"
#include "unionret/rng.hpp"
#include "unionret/trainer.hpp"

namespace unionret::gradsuite {

using nd::NamedTensor;
using nd::Shape;
using nd::Tape;
using nd::Tensor;

namespace {

Tensor random_leaf(Rng& rng, Shape shape, double scale = 1.0) {
    std::vector<double> v(nd::numel(shape));
    for (auto& x : v) x = scale * rng.normal();
    return Tensor::from(std::move(shape), std::move(v), true);
}

Tensor random_const(Rng& rng, Shape shape) {
    std::vector<double> v(nd::numel(shape));
    for (auto& x : v) x = rng.normal();
    return Tensor::from(std::move(shape), std::move(v));
}

// sum(out * w) for a fixed random w of out's shape.
struct Projector {
    Tensor weights;
    Tensor operator()(Tape& tape, const Tensor& out) const {
        return nd::reduce_sum(tape, nd::mul(tape, out, weights));
    }
};

using Build = std::function<Tensor(Tape&)>;

CaseSetup unary_case(std::uint64_t seed, Shape shape, Shape out_shape, std::function<Tensor(Tape&, const Tensor&)> op,
                     double scale = 1.0) {
    Rng rng(seed);
    auto x = random_leaf(rng, shape, scale);
    Projector proj{random_const(rng, out_shape)};
    return {{{"x", x}}, [=](Tape& t) { return proj(t, op(t, x)); }, nullptr};
}

CaseSetup binary_case(std::uint64_t seed, Shape a_shape, Shape b_shape, Shape out_shape,
                      std::function<Tensor(Tape&, const Tensor&, const Tensor&)> op) {
    Rng rng(seed);
    auto a = random_leaf(rng, a_shape);
    auto b = random_leaf(rng, b_shape);
    Projector proj{random_const(rng, out_shape)};
    return {{{"a", a}, {"b", b}}, [=](Tape& t) { return proj(t, op(t, a, b)); }, nullptr};
}

void jitter(const model::ModelParams& params, Rng& rng, double scale) {
    for (const auto& p : params.named()) {
        auto tensor = p.tensor;
        for (auto& v : tensor.data()) v += scale * rng.normal();
    }
}

model::ModelConfig suite_config(std::uint64_t seed) {
    model::ModelConfig cfg;
    cfg.dim = 16;
    cfg.union_layers = 2;
    cfg.union_heads = 2;
    cfg.head_dim = 8;
    cfg.fusion_layers = 2;
    cfg.fusion_heads = 2;
    cfg.ffn_mult = 4;
    cfg.seed = seed;
    return cfg;
}

struct ModelBundle {
    model::ModelConfig config;
    model::ModelParams params;
};

std::shared_ptr<ModelBundle> make_bundle(std::uint64_t seed) {
    auto bundle = std::make_shared<ModelBundle>();
    bundle->config = suite_config(seed);
    bundle->params = model::init_params(bundle->config);
    Rng rng(seed ^ 0x9e3779b97f4a7c15ULL);
    jitter(bundle->params, rng, 0.1);
    return bundle;
}

CaseSetup pipeline_case(std::uint64_t seed, model::TargetMode mode, double tau) {
    auto bundle = make_bundle(seed);
    bundle->config.tau = tau;
    Rng rng(seed + 1);
    const std::size_t b = 4, d = bundle->config.dim;
    trainer::BatchInputs batch{random_leaf(rng, {b, d}), random_leaf(rng, {b, d}), random_leaf(rng, {b, d}),
                               random_leaf(rng, {b, d}, 0.5)};
    std::vector<NamedTensor> inputs = bundle->params.named();
    inputs.push_back({"e_ref", batch.reference});
    inputs.push_back({"e_text", batch.text});
    inputs.push_back({"e_target", batch.target});
    inputs.push_back({"e_null", batch.null_text});
    auto fn = [bundle, batch, mode](Tape& t) {
        return trainer::pipeline_loss(t, bundle->params, bundle->config, mode, batch);
    };
    return {std::move(inputs), fn, bundle};
}

std::vector<GradCase> build_cases() {
    std::vector<GradCase> cases;
    auto add = [&](std::string name, std::function<CaseSetup(std::uint64_t)> setup) {
        cases.push_back({std::move(name), std::move(setup)});
    };

    add("matmul.2d", [](std::uint64_t s) {
        return binary_case(s, {3, 4}, {4, 5}, {3, 5}, [](Tape& t, const Tensor& a, const Tensor& b) {
            return nd::matmul(t, a, b);
        });
    });
    add("matmul.batched", [](std::uint64_t s) {
        return binary_case(s, {2, 3, 4}, {2, 4, 5}, {2, 3, 5}, [](Tape& t, const Tensor& a, const Tensor& b) {
            return nd::matmul(t, a, b);
        });
    });
    add("matmul.shared_rhs", [](std::uint64_t s) {
        return binary_case(s, {2, 3, 4}, {4, 5}, {2, 3, 5}, [](Tape& t, const Tensor& a, const Tensor& b) {
            return nd::matmul(t, a, b);
        });
    });
    add("add", [](std::uint64_t s) {
        return binary_case(s, {2, 3, 4}, {2, 3, 4}, {2, 3, 4},
                           [](Tape& t, const Tensor& a, const Tensor& b) { return nd::add(t, a, b); });
    });
    add("add.scalar", [](std::uint64_t s) {
        return unary_case(s, {3, 4}, {3, 4}, [](Tape& t, const Tensor& x) { return nd::add(t, x, 0.7); });
    });
    add("sub", [](std::uint64_t s) {
        return binary_case(s, {3, 4}, {3, 4}, {3, 4},
                           [](Tape& t, const Tensor& a, const Tensor& b) { return nd::sub(t, a, b); });
    });
    add("mul", [](std::uint64_t s) {
        return binary_case(s, {3, 4}, {3, 4}, {3, 4},
                           [](Tape& t, const Tensor& a, const Tensor& b) { return nd::mul(t, a, b); });
    });
    add("scale", [](std::uint64_t s) {
        return unary_case(s, {3, 4}, {3, 4}, [](Tape& t, const Tensor& x) { return nd::scale(t, x, -1.3); });
    });
    add("sigmoid", [](std::uint64_t s) {
        return unary_case(s, {3, 4}, {3, 4}, [](Tape& t, const Tensor& x) { return nd::sigmoid(t, x); }, 2.0);
    });
    add("gelu", [](std::uint64_t s) {
        return unary_case(s, {3, 4}, {3, 4}, [](Tape& t, const Tensor& x) { return nd::gelu(t, x); }, 2.0);
    });
    add("add_trailing", [](std::uint64_t s) {
        return binary_case(s, {2, 3, 4}, {3, 4}, {2, 3, 4},
                           [](Tape& t, const Tensor& a, const Tensor& b) { return nd::add_trailing(t, a, b); });
    });
    add("lerp", [](std::uint64_t s) {
        Rng rng(s);
        auto from = random_leaf(rng, {3, 4});
        auto to = random_leaf(rng, {3, 4});
        std::vector<double> w(12);
        for (auto& v : w) v = rng.uniform(0.05, 0.95);
        auto weight = Tensor::from({3, 4}, std::move(w), true);
        Projector proj{random_const(rng, {3, 4})};
        return CaseSetup{{{"from", from}, {"to", to}, {"weight", weight}},
                         [=](Tape& t) { return proj(t, nd::lerp(t, from, to, weight)); }, nullptr};
    });
    add("softmax_lastdim", [](std::uint64_t s) {
        return unary_case(s, {2, 3, 5}, {2, 3, 5}, [](Tape& t, const Tensor& x) { return nd::softmax_lastdim(t, x); });
    });
    add("layer_norm", [](std::uint64_t s) {
        Rng rng(s);
        auto x = random_leaf(rng, {2, 3, 6});
        auto gamma = random_leaf(rng, {6});
        auto beta = random_leaf(rng, {6});
        Projector proj{random_const(rng, {2, 3, 6})};
        return CaseSetup{{{"x", x}, {"gamma", gamma}, {"beta", beta}},
                         [=](Tape& t) { return proj(t, nd::layer_norm(t, x, gamma, beta, model::kLayerNormEps)); },
                         nullptr};
    });
    for (std::size_t axis = 0; axis < 3; ++axis) {
        Shape out{2, 3, 4};
        out.erase(out.begin() + static_cast<std::ptrdiff_t>(axis));
        add("reduce_mean.axis" + std::to_string(axis), [axis, out](std::uint64_t s) {
            return unary_case(s, {2, 3, 4}, out, [axis](Tape& t, const Tensor& x) { return nd::reduce_mean(t, x, axis); });
        });
    }
    add("reduce_sum", [](std::uint64_t s) {
        Rng rng(s);
        auto x = random_leaf(rng, {3, 4});
        return CaseSetup{{{"x", x}}, [=](Tape& t) { return nd::reduce_sum(t, nd::mul(t, x, x)); }, nullptr};
    });
    add("transpose_last2", [](std::uint64_t s) {
        return unary_case(s, {2, 3, 4}, {2, 4, 3}, [](Tape& t, const Tensor& x) { return nd::transpose_last2(t, x); });
    });
    add("slice_lastdim", [](std::uint64_t s) {
        return unary_case(s, {2, 3, 6}, {2, 3, 2},
                          [](Tape& t, const Tensor& x) { return nd::slice_lastdim(t, x, 3, 2); });
    });
    add("concat_lastdim", [](std::uint64_t s) {
        return binary_case(s, {2, 3, 2}, {2, 3, 4}, {2, 3, 6}, [](Tape& t, const Tensor& a, const Tensor& b) {
            std::array<Tensor, 2> parts{a, b};
            return nd::concat_lastdim(t, parts);
        });
    });
    add("stack_tokens", [](std::uint64_t s) {
        return binary_case(s, {3, 4}, {3, 4}, {3, 2, 4}, [](Tape& t, const Tensor& a, const Tensor& b) {
            std::array<Tensor, 2> rows{a, b};
            return nd::stack_tokens(t, rows);
        });
    });
    add("select_token", [](std::uint64_t s) {
        return unary_case(s, {3, 2, 4}, {3, 4}, [](Tape& t, const Tensor& x) { return nd::select_token(t, x, 1); });
    });
    add("l2_normalize_rows", [](std::uint64_t s) {
        return unary_case(s, {3, 5}, {3, 5}, [](Tape& t, const Tensor& x) { return nd::l2_normalize_rows(t, x); });
    });
    add("softmax_cross_entropy", [](std::uint64_t s) {
        Rng rng(s);
        auto logits = random_leaf(rng, {4, 4}, 2.0);
        return CaseSetup{{{"logits", logits}},
                         [=](Tape& t) {
                             const std::array<std::size_t, 4> labels{0, 1, 2, 3};
                             return nd::softmax_cross_entropy(t, logits, labels);
                         },
                         nullptr};
    });
    for (double tau : {1.0, 0.01}) {
        add(tau == 1.0 ? "bbc_loss.tau1" : "bbc_loss.tau0.01", [tau](std::uint64_t s) {
            Rng rng(s);
            auto fused = random_leaf(rng, {4, 8});
            auto targets = random_leaf(rng, {4, 8});
            return CaseSetup{{{"fused", fused}, {"targets", targets}},
                             [=](Tape& t) { return objective::bbc_loss(t, fused, targets, {tau}); }, nullptr};
        });
    }
    add("transformer_block", [](std::uint64_t s) {
        auto bundle = make_bundle(s);
        Rng rng(s + 1);
        auto x = random_leaf(rng, {3, 2, bundle->config.dim});
        Projector proj{random_const(rng, {3, 2, bundle->config.dim})};
        std::vector<NamedTensor> inputs{{"x", x}};
        const auto named = bundle->params.named();
        for (const auto& p : named) {
            if (p.name.rfind("union.0.", 0) == 0) inputs.push_back(p);
        }
        auto fn = [bundle, x, proj](Tape& t) {
            return proj(t, model::transformer_block(t, x, bundle->params.union_blocks[0], bundle->config.union_heads));
        };
        return CaseSetup{std::move(inputs), fn, bundle};
    });
    add("union_gate", [](std::uint64_t s) {
        auto bundle = make_bundle(s);
        Rng rng(s + 1);
        const std::size_t d = bundle->config.dim;
        auto target = random_leaf(rng, {4, d});
        auto null_text = random_leaf(rng, {4, d}, 0.5);
        Projector proj{random_const(rng, {4, d})};
        std::vector<NamedTensor> inputs;
        for (const auto& p : bundle->params.named()) {
            if (p.name.rfind("fusion.", 0) != 0) inputs.push_back(p);
        }
        inputs.push_back({"e_target", target});
        inputs.push_back({"e_null", null_text});
        auto fn = [bundle, target, null_text, proj](Tape& t) {
            return proj(t, model::union_forward(t, bundle->params, bundle->config, target, null_text).feature);
        };
        return CaseSetup{std::move(inputs), fn, bundle};
    });
    add("pipeline.union.tau1", [](std::uint64_t s) { return pipeline_case(s, model::TargetMode::Union, 1.0); });
    add("pipeline.union", [](std::uint64_t s) { return pipeline_case(s, model::TargetMode::Union, 0.01); });
    add("pipeline.sum", [](std::uint64_t s) { return pipeline_case(s, model::TargetMode::Sum, 0.01); });
    add("pipeline.original", [](std::uint64_t s) { return pipeline_case(s, model::TargetMode::Original, 0.01); });
    return cases;
}

} // namespace

const std::vector<GradCase>& gradient_cases() {
    static const std::vector<GradCase> cases = build_cases();
    return cases;
}

SuiteResult run_gradient_suite(std::uint64_t seed, double eps, double tol, const std::string& filter) {
    using clock = std::chrono::steady_clock;
    const auto suite_start = clock::now();
    SuiteResult result;
    result.passed = true;
    const auto& cases = gradient_cases();
    for (std::size_t i = 0; i < cases.size(); ++i) {
        if (!filter.empty() && cases[i].name.find(filter) == std::string::npos) continue;
        const auto start = clock::now();
        const auto setup = cases[i].setup(seed * 1000003ULL + i);
        auto report = nd::grad_check(setup.function, setup.inputs, eps, tol);
        const double secs = std::chrono::duration<double>(clock::now() - start).count();
        result.passed = result.passed && report.passed;
        result.cases.push_back({cases[i].name, std::move(report), secs});
    }
    if (result.cases.empty()) result.passed = false;
    result.seconds = std::chrono::duration<double>(clock::now() - suite_start).count();
    return result;
}

} // namespace unionret::gradsuite
