#include "unionret/model.hpp"

#include <cmath>

#include "unionret/errors.hpp"
#include "unionret/rng.hpp"

namespace unionret::model {

using nd::Tape;
using nd::Tensor;

std::string_view to_string(TargetMode mode) {
    switch (mode) {
    case TargetMode::Original: return "original";
    case TargetMode::Sum: return "sum";
    case TargetMode::Union: return "union";
    }
    return "?";
}

TargetMode parse_target_mode(std::string_view name) {
    if (name == "original") return TargetMode::Original;
    if (name == "sum") return TargetMode::Sum;
    if (name == "union") return TargetMode::Union;
    throw ValidationError("unknown target mode '" + std::string(name) + "' (expected original|sum|union)");
}

std::string_view to_string(Pooling pool) { return pool == Pooling::Mean ? "mean" : "first"; }

Pooling parse_pooling(std::string_view name) {
    if (name == "mean") return Pooling::Mean;
    if (name == "first") return Pooling::First;
    throw ValidationError("unknown pooling '" + std::string(name) + "' (expected mean|first)");
}

void ModelConfig::validate() const {
    if (dim == 0 || union_layers == 0 || union_heads == 0 || head_dim == 0 || fusion_layers == 0 ||
        fusion_heads == 0 || ffn_mult == 0) {
        throw ValidationError("model config: all sizes must be positive");
    }
    if (dim < 2) throw ValidationError("model config: dim must be >= 2");
    if (union_heads * head_dim != dim) {
        throw ValidationError("model config: union_heads * head_dim = " + std::to_string(union_heads) + " * " +
                              std::to_string(head_dim) + " != dim " + std::to_string(dim));
    }
    if (dim % fusion_heads != 0) {
        throw ValidationError("model config: fusion_heads " + std::to_string(fusion_heads) + " does not divide dim " +
                              std::to_string(dim));
    }
    if (!(tau > 0.0) || !std::isfinite(tau)) throw ValidationError("model config: tau must be > 0");
}

ModelConfig ModelConfig::for_dim(std::size_t dim, std::uint64_t seed) {
    ModelConfig c;
    c.dim = dim;
    c.seed = seed;
    if (dim % 64 == 0) {
        c.head_dim = 64;
        c.union_heads = dim / 64;
    } else if (dim % 2 == 0) {
        c.union_heads = 2;
        c.head_dim = dim / 2;
    } else {
        c.union_heads = 1;
        c.head_dim = dim;
    }
    c.fusion_heads = dim % 8 == 0 ? 8 : (dim % 2 == 0 ? 2 : 1);
    return c;
}

nlohmann::json ModelConfig::to_json() const {
    return {
        {"dim", dim},
        {"union_layers", union_layers},
        {"union_heads", union_heads},
        {"head_dim", head_dim},
        {"fusion_layers", fusion_layers},
        {"fusion_heads", fusion_heads},
        {"ffn_mult", ffn_mult},
        {"pool", std::string(to_string(pool))},
        {"tau", tau},
        {"seed", seed},
    };
}

ModelConfig ModelConfig::from_json(const nlohmann::json& j) {
    try {
        ModelConfig c;
        c.dim = j.at("dim").get<std::size_t>();
        c.union_layers = j.at("union_layers").get<std::size_t>();
        c.union_heads = j.at("union_heads").get<std::size_t>();
        c.head_dim = j.at("head_dim").get<std::size_t>();
        c.fusion_layers = j.at("fusion_layers").get<std::size_t>();
        c.fusion_heads = j.at("fusion_heads").get<std::size_t>();
        c.ffn_mult = j.at("ffn_mult").get<std::size_t>();
        c.pool = parse_pooling(j.at("pool").get<std::string>());
        c.tau = j.at("tau").get<double>();
        c.seed = j.at("seed").get<std::uint64_t>();
        return c;
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("model config: ") + e.what());
    }
}

namespace {

Linear make_linear(std::size_t in, std::size_t out) {
    return {Tensor::zeros({in, out}, true), Tensor::zeros({out}, true)};
}

BlockParams make_block(std::size_t dim, std::size_t ffn_mult) {
    BlockParams b;
    b.ln1_gamma = Tensor::zeros({dim}, true);
    b.ln1_beta = Tensor::zeros({dim}, true);
    b.q = make_linear(dim, dim);
    b.k_weight = Tensor::zeros({dim, dim}, true);
    b.v = make_linear(dim, dim);
    b.o = make_linear(dim, dim);
    b.ln2_gamma = Tensor::zeros({dim}, true);
    b.ln2_beta = Tensor::zeros({dim}, true);
    b.ffn_in = make_linear(dim, ffn_mult * dim);
    b.ffn_out = make_linear(ffn_mult * dim, dim);
    return b;
}

void append_block(std::vector<nd::NamedTensor>& out, const std::string& prefix, const BlockParams& b) {
    out.push_back({prefix + ".ln1.gamma", b.ln1_gamma});
    out.push_back({prefix + ".ln1.beta", b.ln1_beta});
    out.push_back({prefix + ".attn.q.weight", b.q.weight});
    out.push_back({prefix + ".attn.q.bias", b.q.bias});
    out.push_back({prefix + ".attn.k.weight", b.k_weight});
    const std::pair<const char*, const Linear*> attn[] = {{"v", &b.v}, {"o", &b.o}};
    for (const auto& [name, lin] : attn) {
        out.push_back({prefix + ".attn." + name + ".weight", lin->weight});
        out.push_back({prefix + ".attn." + name + ".bias", lin->bias});
    }
    out.push_back({prefix + ".ln2.gamma", b.ln2_gamma});
    out.push_back({prefix + ".ln2.beta", b.ln2_beta});
    out.push_back({prefix + ".ffn.in.weight", b.ffn_in.weight});
    out.push_back({prefix + ".ffn.in.bias", b.ffn_in.bias});
    out.push_back({prefix + ".ffn.out.weight", b.ffn_out.weight});
    out.push_back({prefix + ".ffn.out.bias", b.ffn_out.bias});
}

bool ends_with(std::string_view s, std::string_view suffix) {
    return s.size() >= suffix.size() && s.substr(s.size() - suffix.size()) == suffix;
}

Tensor linear(Tape& tape, const Tensor& x, const Linear& lin) {
    return nd::add_trailing(tape, nd::matmul(tape, x, lin.weight), lin.bias);
}

void check_rows(const Tensor& t, const ModelConfig& config, const char* what) {
    if (t.rank() != 2 || t.dim(1) != config.dim) {
        throw ValidationError(std::string(what) + ": expected [B," + std::to_string(config.dim) + "], got " +
                              nd::shape_string(t.shape()));
    }
}

Tensor encode_pair(Tape& tape, const std::vector<BlockParams>& blocks, const Tensor& token_types, std::size_t heads,
                   const Tensor& first, const Tensor& second, Tensor* transformed) {
    const std::array<Tensor, 2> rows{first, second};
    Tensor x = nd::add_trailing(tape, nd::stack_tokens(tape, rows), token_types);
    for (const auto& block : blocks) x = transformer_block(tape, x, block, heads);
    if (transformed) *transformed = x;
    return x;
}

Tensor pool_tokens(Tape& tape, const Tensor& x, Pooling pool) {
    return pool == Pooling::Mean ? nd::reduce_mean(tape, x, 1) : nd::select_token(tape, x, 0);
}

Tensor row_tensor(std::span<const double> v, const ModelConfig& config, const char* what) {
    if (v.size() != config.dim) {
        throw ValidationError(std::string(what) + ": dimension " + std::to_string(v.size()) + " != model dim " +
                              std::to_string(config.dim));
    }
    return Tensor::from({1, v.size()}, std::vector<double>(v.begin(), v.end()));
}

std::vector<double> to_vector(const Tensor& t) { return {t.data().begin(), t.data().end()}; }

} // namespace

std::vector<nd::NamedTensor> ModelParams::named() const {
    std::vector<nd::NamedTensor> out;
    for (std::size_t i = 0; i < fusion.size(); ++i) append_block(out, "fusion." + std::to_string(i), fusion[i]);
    for (std::size_t i = 0; i < union_blocks.size(); ++i) {
        append_block(out, "union." + std::to_string(i), union_blocks[i]);
    }
    out.push_back({"fusion.token_types", fusion_token_types});
    out.push_back({"union.token_types", union_token_types});
    out.push_back({"gate.hidden.weight", gate_hidden.weight});
    out.push_back({"gate.hidden.bias", gate_hidden.bias});
    out.push_back({"gate.out.weight", gate_out.weight});
    out.push_back({"gate.out.bias", gate_out.bias});
    return out;
}

std::size_t ModelParams::parameter_count() const {
    std::size_t n = 0;
    for (const auto& p : named()) n += p.tensor.numel();
    return n;
}

ModelParams ModelParams::clone() const {
    ModelParams copy;
    copy.fusion.resize(fusion.size());
    copy.union_blocks.resize(union_blocks.size());
    auto deep = [](const Tensor& t) {
        return Tensor::from(t.shape(), std::vector<double>(t.data().begin(), t.data().end()), t.requires_grad());
    };
    auto deep_linear = [&](const Linear& l) { return Linear{deep(l.weight), deep(l.bias)}; };
    auto deep_block = [&](const BlockParams& b) {
        return BlockParams{deep(b.ln1_gamma),   deep(b.ln1_beta),   deep_linear(b.q),      deep(b.k_weight),
                           deep_linear(b.v),    deep_linear(b.o),   deep(b.ln2_gamma),     deep(b.ln2_beta),
                           deep_linear(b.ffn_in), deep_linear(b.ffn_out)};
    };
    for (std::size_t i = 0; i < fusion.size(); ++i) copy.fusion[i] = deep_block(fusion[i]);
    for (std::size_t i = 0; i < union_blocks.size(); ++i) copy.union_blocks[i] = deep_block(union_blocks[i]);
    copy.fusion_token_types = deep(fusion_token_types);
    copy.union_token_types = deep(union_token_types);
    copy.gate_hidden = deep_linear(gate_hidden);
    copy.gate_out = deep_linear(gate_out);
    return copy;
}

void ModelParams::zero_grad() const {
    for (auto& p : named()) p.tensor.zero_grad();
}

ModelParams allocate_params(const ModelConfig& config) {
    config.validate();
    ModelParams p;
    for (std::size_t i = 0; i < config.fusion_layers; ++i) p.fusion.push_back(make_block(config.dim, config.ffn_mult));
    for (std::size_t i = 0; i < config.union_layers; ++i) {
        p.union_blocks.push_back(make_block(config.dim, config.ffn_mult));
    }
    p.fusion_token_types = Tensor::zeros({2, config.dim}, true);
    p.union_token_types = Tensor::zeros({2, config.dim}, true);
    p.gate_hidden = make_linear(config.dim, config.dim);
    p.gate_out = make_linear(config.dim, config.dim);
    return p;
}

std::size_t parameter_count(const ModelConfig& config) {
    config.validate();
    const std::size_t d = config.dim;
    const std::size_t f = config.ffn_mult * d;
    const std::size_t block = 4 * d + 4 * d * d + 3 * d + (d * f + f) + (f * d + d);
    return (config.fusion_layers + config.union_layers) * block + 4 * d + 2 * (d * d + d);
}

ModelParams init_params(const ModelConfig& config) {
    ModelParams p = allocate_params(config);
    Rng rng(config.seed);
    for (auto& [name, tensor] : p.named()) {
        auto values = tensor.data();
        if (ends_with(name, ".weight")) {
            const double bound = 1.0 / std::sqrt(static_cast<double>(tensor.dim(0)));
            for (auto& v : values) v = rng.uniform(-bound, bound);
        } else if (ends_with(name, "token_types")) {
            const double bound = 1.0 / std::sqrt(static_cast<double>(config.dim));
            for (auto& v : values) v = rng.uniform(-bound, bound);
        } else if (ends_with(name, ".gamma")) {
            std::fill(values.begin(), values.end(), 1.0);
        } else {
            std::fill(values.begin(), values.end(), 0.0);
        }
    }
    return p;
}

Tensor transformer_block(Tape& tape, const Tensor& x, const BlockParams& block, std::size_t heads,
                         std::vector<Tensor>* attention) {
    if (x.rank() != 3) throw ValidationError("transformer_block: input must be [B,T,D]");
    const std::size_t d = x.dim(2);
    if (block.q.weight.dim(0) != d || heads == 0 || d % heads != 0) {
        throw ValidationError("transformer_block: input width " + std::to_string(d) +
                              " does not match block parameters / head count");
    }
    const std::size_t hd = d / heads;
    const double score_scale = 1.0 / std::sqrt(static_cast<double>(hd));

    Tensor xn = nd::layer_norm(tape, x, block.ln1_gamma, block.ln1_beta, kLayerNormEps);
    Tensor q = linear(tape, xn, block.q);
    Tensor k = nd::matmul(tape, xn, block.k_weight);
    Tensor v = linear(tape, xn, block.v);
    std::vector<Tensor> head_out;
    head_out.reserve(heads);
    for (std::size_t h = 0; h < heads; ++h) {
        Tensor qh = nd::slice_lastdim(tape, q, h * hd, hd);
        Tensor kh = nd::slice_lastdim(tape, k, h * hd, hd);
        Tensor vh = nd::slice_lastdim(tape, v, h * hd, hd);
        Tensor scores = nd::scale(tape, nd::matmul(tape, qh, nd::transpose_last2(tape, kh)), score_scale);
        Tensor probs = nd::softmax_lastdim(tape, scores);
        if (attention) attention->push_back(probs);
        head_out.push_back(nd::matmul(tape, probs, vh));
    }
    Tensor attn = linear(tape, nd::concat_lastdim(tape, head_out), block.o);
    Tensor h = nd::add(tape, x, attn);

    Tensor hn = nd::layer_norm(tape, h, block.ln2_gamma, block.ln2_beta, kLayerNormEps);
    Tensor ff = linear(tape, nd::gelu(tape, linear(tape, hn, block.ffn_in)), block.ffn_out);
    return nd::add(tape, h, ff);
}

Tensor fuse_query(Tape& tape, const ModelParams& params, const ModelConfig& config, const Tensor& e_ref,
                  const Tensor& e_text) {
    check_rows(e_ref, config, "fuse_query reference");
    check_rows(e_text, config, "fuse_query text");
    if (e_ref.dim(0) != e_text.dim(0)) throw ValidationError("fuse_query: batch sizes differ");
    Tensor x = encode_pair(tape, params.fusion, params.fusion_token_types, config.fusion_heads, e_ref, e_text, nullptr);
    return pool_tokens(tape, x, config.pool);
}

UnionResult union_forward(Tape& tape, const ModelParams& params, const ModelConfig& config, const Tensor& e_target,
                          const Tensor& e_null) {
    check_rows(e_target, config, "union_forward target");
    check_rows(e_null, config, "union_forward null text");
    if (e_target.dim(0) != e_null.dim(0)) throw ValidationError("union_forward: batch sizes differ");
    UnionResult r;
    Tensor x = encode_pair(tape, params.union_blocks, params.union_token_types, config.union_heads, e_target, e_null,
                           &r.transformed);
    r.pooled = pool_tokens(tape, x, config.pool);
    Tensor hidden = nd::gelu(tape, linear(tape, r.pooled, params.gate_hidden));
    r.target_gate = nd::sigmoid(tape, linear(tape, hidden, params.gate_out));
    r.feature = nd::lerp(tape, e_null, e_target, r.target_gate);
    return r;
}

Tensor target_feature(Tape& tape, TargetMode mode, const ModelParams& params, const ModelConfig& config,
                      const Tensor& e_target, const Tensor& e_null) {
    check_rows(e_target, config, "target_feature target");
    check_rows(e_null, config, "target_feature null text");
    switch (mode) {
    case TargetMode::Original: return e_target;
    case TargetMode::Sum: return nd::add(tape, e_target, e_null);
    case TargetMode::Union: return union_forward(tape, params, config, e_target, e_null).feature;
    }
    throw ValidationError("target_feature: invalid mode");
}

std::vector<double> fuse_query(const ModelParams& params, const ModelConfig& config, std::span<const double> e_ref,
                               std::span<const double> e_text) {
    Tape tape(false);
    return to_vector(fuse_query(tape, params, config, row_tensor(e_ref, config, "fuse_query reference"),
                                row_tensor(e_text, config, "fuse_query text")));
}

UnionVectors union_forward(const ModelParams& params, const ModelConfig& config, std::span<const double> e_target,
                           std::span<const double> e_null) {
    Tape tape(false);
    auto r = union_forward(tape, params, config, row_tensor(e_target, config, "union_forward target"),
                           row_tensor(e_null, config, "union_forward null text"));
    return {to_vector(r.feature), to_vector(r.target_gate)};
}

std::vector<double> target_feature(TargetMode mode, const ModelParams& params, const ModelConfig& config,
                                   std::span<const double> e_target, std::span<const double> e_null) {
    Tape tape(false);
    return to_vector(target_feature(tape, mode, params, config, row_tensor(e_target, config, "target_feature target"),
                                    row_tensor(e_null, config, "target_feature null text")));
}

Tensor stack_rows(std::span<const std::vector<double>> rows) {
    if (rows.empty()) throw ValidationError("stack_rows: no rows");
    const std::size_t d = rows[0].size();
    std::vector<double> values;
    values.reserve(rows.size() * d);
    for (const auto& r : rows) {
        if (r.size() != d) throw ValidationError("stack_rows: ragged rows");
        values.insert(values.end(), r.begin(), r.end());
    }
    return Tensor::from({rows.size(), d}, std::move(values));
}

Tensor repeat_row(std::span<const double> row, std::size_t count) {
    std::vector<double> values;
    values.reserve(row.size() * count);
    for (std::size_t i = 0; i < count; ++i) values.insert(values.end(), row.begin(), row.end());
    return Tensor::from({count, row.size()}, std::move(values));
}

} // namespace unionret::model
