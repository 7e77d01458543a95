#include "unionret/cli.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <ostream>
#include <set>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "unionret/checkpoint.hpp"
#include "unionret/embedstore.hpp"
#include "unionret/errors.hpp"
#include "unionret/evalmetrics.hpp"
#include "unionret/gradsuite.hpp"
#include "unionret/retrieval.hpp"
#include "unionret/trainer.hpp"

namespace unionret::cli {

namespace fs = std::filesystem;

namespace {

constexpr const char* kDefaultMetrics = "recall@1,recall@5,recall@10,map@10,mdr,map-gtn";

struct SynthOptions {
    std::uint64_t seed = 0;
    std::size_t n_queries = 32;
    std::size_t pool_size = 64;
    std::size_t dim = 16;
    double noise = 0.05;
    std::string out;
};

struct TrainOptions {
    std::string triplets, images, texts, null_text, out, log;
    std::string mode = "union";
    std::string pool = "mean";
    std::size_t epochs = 2;
    std::size_t repeats = 1;
    std::size_t batch = 32;
    double lr = 1e-4;
    double weight_decay = 1e-2;
    double tau = 0.01;
    std::uint64_t seed = 0;
    std::size_t union_layers = 2;
    std::size_t fusion_layers = 2;
    std::size_t union_heads = 0;  // 0: derived from dim
    std::size_t fusion_heads = 0; // 0: derived from dim
};

struct IndexOptions {
    std::string checkpoint, images, null_text, mode, exclude_refs_of, out;
};

struct SearchOptions {
    std::string index, checkpoint, triplets, images, texts, null_text, out;
    std::size_t k = 0; // 0: full ranking
};

struct EvalOptions {
    std::string run, qrels, out, backbone_tag, mode, dataset;
    std::string metrics = kDefaultMetrics;
};

struct GradcheckOptions {
    std::uint64_t seed = 0;
    double eps = 1e-5;
    double tol = 1e-4;
    std::string filter;
    bool list = false;
};

struct ReportOptions {
    std::vector<std::string> inputs;
    std::string out, backbone_tag, mode;
};

// Null-text embedding tagged with its file name and a content hash.
NullTextEmbedding load_null_text(const std::string& path) {
    const auto store = read_store(path);
    const auto bytes = encode_store(store.ids(), store.values(), store.dim());
    return NullTextEmbedding::from_store(store, fs::path(path).filename().string() + "#" + model::fnv1a_hex(bytes));
}

std::string format_fixed(double v, int decimals = 6) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.*f", decimals, v);
    return buf;
}

void run_synth(const SynthOptions& o, std::ostream& out) {
    SynthParams params{o.seed, o.n_queries, o.pool_size, o.dim, o.noise};
    const auto ds = synth_dataset(params);
    const fs::path dir(o.out);
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) throw FormatError("cannot create directory '" + dir.string() + "': " + ec.message());

    write_store(ds.images, dir / "images.ueb");
    write_store(ds.texts, dir / "texts.ueb");
    const std::vector<std::string> null_ids{std::string(kNullTextId)};
    std::vector<float> null_values(ds.null_text.vector.begin(), ds.null_text.vector.end());
    write_store(null_ids, null_values, o.dim, dir / "null.ueb");
    write_triplets(ds.triplets, dir / "triplets.jsonl");
    write_qrels(ds.qrels, dir / "qrels.tsv");
    out << "wrote " << ds.images.size() << " images, " << ds.texts.size() << " captions, " << ds.triplets.size()
        << " triplets to " << dir.string() << "\n";
}

model::ModelConfig train_model_config(const TrainOptions& o, std::size_t dim) {
    auto cfg = model::ModelConfig::for_dim(dim, o.seed);
    cfg.union_layers = o.union_layers;
    cfg.fusion_layers = o.fusion_layers;
    if (o.union_heads != 0) {
        if (dim % o.union_heads != 0) {
            throw ValidationError("--union-heads " + std::to_string(o.union_heads) + " does not divide dim " +
                                  std::to_string(dim));
        }
        cfg.union_heads = o.union_heads;
        cfg.head_dim = dim / o.union_heads;
    }
    if (o.fusion_heads != 0) cfg.fusion_heads = o.fusion_heads;
    cfg.pool = model::parse_pooling(o.pool);
    cfg.tau = o.tau;
    cfg.validate();
    return cfg;
}

void run_train(const TrainOptions& o, std::ostream& out) {
    const auto images = read_store(o.images);
    const auto texts = read_store(o.texts);
    const auto null_text = load_null_text(o.null_text);
    const auto triplets = load_triplets(o.triplets, images, texts);

    const auto model_cfg = train_model_config(o, images.dim());
    trainer::TrainConfig train_cfg;
    train_cfg.epochs = o.epochs;
    train_cfg.repeats = o.repeats;
    train_cfg.batch_size = o.batch;
    train_cfg.lr = o.lr;
    train_cfg.weight_decay = o.weight_decay;
    train_cfg.seed = o.seed;
    train_cfg.mode = model::parse_target_mode(o.mode);

    const auto result = trainer::train(triplets, images, texts, null_text, model_cfg, train_cfg);
    model::save_checkpoint(result.params, model_cfg, o.out, train_cfg.mode);
    const fs::path log_path = o.log.empty() ? fs::path(o.out).parent_path() / "log.jsonl" : fs::path(o.log);
    write_file(log_path, trainer::format_log(result, train_cfg));
    out << "mode " << model::to_string(train_cfg.mode) << ": " << result.steps << " steps, first loss "
        << format_fixed(result.first_batch_loss) << ", final epoch mean loss "
        << format_fixed(result.final_epoch_mean_loss) << "\n";
}

void run_index(const IndexOptions& o, std::size_t threads, std::ostream& out) {
    const auto ckpt_bytes = read_file(o.checkpoint);
    const auto ckpt = model::decode_checkpoint(ckpt_bytes, o.checkpoint);
    auto images = read_store(o.images);
    const auto null_text = load_null_text(o.null_text);

    model::TargetMode mode = model::TargetMode::Original;
    if (!o.mode.empty()) {
        mode = model::parse_target_mode(o.mode);
    } else if (ckpt.target_mode) {
        mode = *ckpt.target_mode;
    }

    if (!o.exclude_refs_of.empty()) {
        const auto triplets = parse_triplets(read_file(o.exclude_refs_of));
        std::set<std::string, std::less<>> targets, refs;
        for (const auto& t : triplets) targets.insert(t.target_image_id);
        for (const auto& t : triplets) {
            if (!targets.contains(t.query_image_id)) refs.insert(t.query_image_id);
        }
        images = images.without(refs);
    }

    auto index = retrieval::build_index(images, null_text, mode, ckpt.params, ckpt.config, threads);
    index.checkpoint_hash = model::fnv1a_hex(ckpt_bytes);
    retrieval::save_index(index, o.out);
    out << "indexed " << index.size() << " candidates (mode " << model::to_string(mode) << ")\n";
}

void run_search(const SearchOptions& o, std::size_t threads, std::ostream& out) {
    const auto index = retrieval::load_index(o.index);
    const auto ckpt_bytes = read_file(o.checkpoint);
    const auto ckpt = model::decode_checkpoint(ckpt_bytes, o.checkpoint);
    if (!index.checkpoint_hash.empty() && index.checkpoint_hash != model::fnv1a_hex(ckpt_bytes)) {
        throw ValidationError("index was built from a different checkpoint (" + index.checkpoint_hash + ")");
    }
    const auto images = read_store(o.images);
    const auto texts = read_store(o.texts);
    const auto null_text = load_null_text(o.null_text);
    if (!index.null_text_tag.empty() && index.null_text_tag != null_text.source_tag) {
        throw ValidationError("null-text embedding '" + null_text.source_tag + "' differs from the index's '" +
                              index.null_text_tag + "'");
    }
    const auto triplets = load_triplets(o.triplets, images, texts);

    const std::size_t k = o.k == 0 ? index.size() : o.k;
    const auto queries = retrieval::embed_queries(triplets, images, texts, null_text, ckpt.params, ckpt.config, threads);
    const auto run = retrieval::batch_search(index, queries, k, threads);
    retrieval::write_run(run, o.out);
    out << "searched " << run.size() << " queries, top " << k << "\n";
}

void run_eval(const EvalOptions& o, std::ostream& out) {
    const auto specs = eval::parse_metric_list(o.metrics);
    const auto run = retrieval::read_run(o.run);
    const auto qrels = load_qrels(o.qrels);
    auto report = eval::evaluate(run, qrels, specs);
    report.backbone_tag = o.backbone_tag;
    report.mode = o.mode;
    report.dataset = o.dataset;
    write_file(o.out, report.to_json().dump(2) + "\n");
    for (const auto& m : report.metrics) out << m.name << "\t" << format_fixed(m.value) << "\n";
}

bool run_gradcheck(const GradcheckOptions& o, std::ostream& out) {
    if (o.list) {
        for (const auto& c : gradsuite::gradient_cases()) out << c.name << "\n";
        return true;
    }
    const auto result = gradsuite::run_gradient_suite(o.seed, o.eps, o.tol, o.filter);
    if (result.cases.empty()) throw ValidationError("no gradient check matches '" + o.filter + "'");
    char line[256];
    for (const auto& c : result.cases) {
        std::snprintf(line, sizeof line, "%-24s max_rel=%.3e %s\n", c.name.c_str(), c.report.max_rel_error,
                      c.report.passed ? "pass" : "FAIL");
        out << line;
        if (!c.report.passed) out << nd::format_report(c.report);
    }
    std::snprintf(line, sizeof line, "%zu checks, tol %.1e: %s\n", result.cases.size(), o.tol,
                  result.passed ? "all passed" : "FAILED");
    out << line;
    return result.passed;
}

void run_report(const ReportOptions& o, std::ostream& out) {
    std::vector<eval::MetricReport> reports;
    for (const auto& path : o.inputs) {
        nlohmann::ordered_json j;
        try {
            j = nlohmann::ordered_json::parse(read_file(path));
        } catch (const nlohmann::json::exception& e) {
            throw FormatError(path + ": " + e.what());
        }
        auto r = eval::MetricReport::from_json(j);
        if (!o.backbone_tag.empty()) r.backbone_tag = o.backbone_tag;
        if (!o.mode.empty()) r.mode = o.mode;
        reports.push_back(std::move(r));
    }
    eval::emit_report(reports, o.out);
    const auto groups = eval::group_reports(reports);
    for (const auto& g : groups) out << g.key << "\taverage\t" << format_fixed(g.average) << "\n";
}

} // namespace

int run_command(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
    CLI::App app{"Embedding-space retrieval with UNION target features", "unionret"};
    app.require_subcommand(1);
    app.fallthrough(false);

    std::size_t threads = 1;
    std::function<int()> action;

    auto add_threads = [&](CLI::App* sub) {
        sub->add_option("--threads", threads, "Worker threads (output is identical for any count)")
            ->check(CLI::Range(std::size_t{1}, std::size_t{256}));
    };

    SynthOptions synth;
    auto* synth_cmd = app.add_subcommand("synth", "Write a deterministic synthetic dataset");
    synth_cmd->add_option("--seed", synth.seed, "Random seed");
    synth_cmd->add_option("--n-queries", synth.n_queries, "Number of queries")->check(CLI::PositiveNumber);
    synth_cmd->add_option("--pool-size", synth.pool_size, "Candidate pool size (>= n-queries)");
    synth_cmd->add_option("--dim", synth.dim, "Embedding width")->check(CLI::PositiveNumber);
    synth_cmd->add_option("--noise", synth.noise, "Target noise standard deviation");
    synth_cmd->add_option("--out", synth.out, "Output directory")->required();
    add_threads(synth_cmd);
    synth_cmd->callback([&] {
        action = [&] {
            run_synth(synth, out);
            return kExitOk;
        };
    });

    TrainOptions train;
    auto* train_cmd = app.add_subcommand("train", "Train the fusion and UNION modules");
    train_cmd->add_option("--triplets", train.triplets, "Training triplets (JSON Lines)")->required();
    train_cmd->add_option("--images", train.images, "Image embedding store (.ueb)")->required();
    train_cmd->add_option("--texts", train.texts, "Caption embedding store (.ueb)")->required();
    train_cmd->add_option("--null-text", train.null_text, "Null-text embedding store (.ueb)")->required();
    train_cmd->add_option("--mode", train.mode, "Target mode: original, sum or union")->capture_default_str();
    train_cmd->add_option("--epochs", train.epochs, "Epochs")->capture_default_str();
    train_cmd->add_option("--repeats", train.repeats, "Shuffled passes over the data per epoch")
        ->capture_default_str();
    train_cmd->add_option("--batch", train.batch, "Batch size")->capture_default_str();
    train_cmd->add_option("--lr", train.lr, "AdamW learning rate")->capture_default_str();
    train_cmd->add_option("--weight-decay", train.weight_decay, "AdamW decoupled weight decay")
        ->capture_default_str();
    train_cmd->add_option("--tau", train.tau, "Loss temperature")->capture_default_str();
    train_cmd->add_option("--seed", train.seed, "Seed for initialization and shuffling")->capture_default_str();
    train_cmd->add_option("--pool", train.pool, "Fusion pooling: mean or first")->capture_default_str();
    train_cmd->add_option("--union-layers", train.union_layers, "UNION transformer layers")->capture_default_str();
    train_cmd->add_option("--fusion-layers", train.fusion_layers, "Fusion transformer layers")
        ->capture_default_str();
    train_cmd->add_option("--union-heads", train.union_heads, "UNION attention heads (default: dim/64)");
    train_cmd->add_option("--fusion-heads", train.fusion_heads, "Fusion attention heads (default: 8)");
    train_cmd->add_option("--out", train.out, "Checkpoint path")->required();
    train_cmd->add_option("--log", train.log, "Loss log (default: log.jsonl beside the checkpoint)");
    add_threads(train_cmd);
    train_cmd->callback([&] {
        action = [&] {
            run_train(train, out);
            return kExitOk;
        };
    });

    IndexOptions index;
    auto* index_cmd = app.add_subcommand("index", "Build a candidate index under a target mode");
    index_cmd->add_option("--checkpoint", index.checkpoint, "Trained checkpoint")->required();
    index_cmd->add_option("--images", index.images, "Candidate image store (.ueb)")->required();
    index_cmd->add_option("--null-text", index.null_text, "Null-text embedding store (.ueb)")->required();
    index_cmd->add_option("--mode", index.mode, "Target mode (default: the checkpoint's training mode)");
    index_cmd->add_option("--exclude-refs-of", index.exclude_refs_of,
                          "Drop these triplets' reference images from the pool unless they are also targets");
    index_cmd->add_option("--out", index.out, "Index path")->required();
    add_threads(index_cmd);
    index_cmd->callback([&] {
        action = [&] {
            run_index(index, threads, out);
            return kExitOk;
        };
    });

    SearchOptions search;
    auto* search_cmd = app.add_subcommand("search", "Rank candidates for every query triplet");
    search_cmd->add_option("--index", search.index, "Index built by `index`")->required();
    search_cmd->add_option("--checkpoint", search.checkpoint, "Checkpoint the index was built from")->required();
    search_cmd->add_option("--triplets", search.triplets, "Query triplets (JSON Lines)")->required();
    search_cmd->add_option("--images", search.images, "Image store holding the reference images")->required();
    search_cmd->add_option("--texts", search.texts, "Caption store")->required();
    search_cmd->add_option("--null-text", search.null_text, "Null-text embedding store")->required();
    search_cmd->add_option("--k", search.k, "Results per query (default: whole pool)");
    search_cmd->add_option("--out", search.out, "Run file (TSV)")->required();
    add_threads(search_cmd);
    search_cmd->callback([&] {
        action = [&] {
            run_search(search, threads, out);
            return kExitOk;
        };
    });

    EvalOptions ev;
    auto* eval_cmd = app.add_subcommand("eval", "Score a run file against qrels");
    eval_cmd->add_option("--run", ev.run, "Run file (TSV)")->required();
    eval_cmd->add_option("--qrels", ev.qrels, "Relevance judgments (TSV)")->required();
    eval_cmd->add_option("--metrics", ev.metrics, "Comma-separated: recall@K, precision@K, map@K, mdr, map-gtn")
        ->capture_default_str();
    eval_cmd->add_option("--out", ev.out, "Report JSON path")->required();
    eval_cmd->add_option("--backbone-tag", ev.backbone_tag, "Backbone label stored in the report");
    eval_cmd->add_option("--mode", ev.mode, "Target-mode label stored in the report");
    eval_cmd->add_option("--dataset", ev.dataset, "Dataset label stored in the report");
    add_threads(eval_cmd);
    eval_cmd->callback([&] {
        action = [&] {
            run_eval(ev, out);
            return kExitOk;
        };
    });

    GradcheckOptions gc;
    auto* gc_cmd = app.add_subcommand("gradcheck", "Check every registered gradient against finite differences");
    gc_cmd->add_option("--seed", gc.seed, "Seed for the random inputs")->capture_default_str();
    gc_cmd->add_option("--eps", gc.eps, "Finite-difference step")->capture_default_str();
    gc_cmd->add_option("--tol", gc.tol, "Maximum relative error")->capture_default_str();
    gc_cmd->add_option("--filter", gc.filter, "Only run checks whose name contains this text");
    gc_cmd->add_flag("--list", gc.list, "List the registered checks");
    add_threads(gc_cmd);
    gc_cmd->callback([&] {
        action = [&] { return run_gradcheck(gc, out) ? kExitOk : kExitValidation; };
    });

    ReportOptions rep;
    auto* rep_cmd = app.add_subcommand("report", "Aggregate eval reports into CSV and JSON tables");
    rep_cmd->add_option("inputs", rep.inputs, "Report JSON files written by `eval`")->required();
    rep_cmd->add_option("--out", rep.out, "CSV path; the JSON mirror is written beside it")->required();
    rep_cmd->add_option("--backbone-tag", rep.backbone_tag, "Override the backbone label of every input");
    rep_cmd->add_option("--mode", rep.mode, "Override the mode label of every input");
    add_threads(rep_cmd);
    rep_cmd->callback([&] {
        action = [&] {
            run_report(rep, out);
            return kExitOk;
        };
    });

    try {
        std::vector<std::string> reversed(args.rbegin(), args.rend());
        app.parse(reversed);
    } catch (const CLI::CallForHelp& e) {
        app.exit(e, out, err);
        return kExitOk;
    } catch (const CLI::CallForAllHelp& e) {
        app.exit(e, out, err);
        return kExitOk;
    } catch (const CLI::ParseError& e) {
        app.exit(e, out, err);
        if (e.get_exit_code() == 0) return kExitOk;
        const auto selected = app.get_subcommands();
        err << (selected.empty() ? app.help() : selected.front()->help());
        return kExitValidation;
    }

    try {
        return action ? action() : kExitValidation;
    } catch (const FormatError& e) {
        err << "error: " << e.what() << "\n";
        return kExitIo;
    } catch (const fs::filesystem_error& e) {
        err << "error: " << e.what() << "\n";
        return kExitIo;
    } catch (const ValidationError& e) {
        err << "error: " << e.what() << "\n";
        return kExitValidation;
    } catch (const std::invalid_argument& e) {
        err << "error: " << e.what() << "\n";
        return kExitValidation;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << "\n";
        return kExitValidation;
    }
}

} // namespace unionret::cli
