#include <chrono>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "wsvd/checkpoint.hpp"
#include "wsvd/costmodel.hpp"
#include "wsvd/decode.hpp"
#include "wsvd/errors.hpp"
#include "wsvd/factorize.hpp"
#include "wsvd/linalg.hpp"
#include "wsvd/parallel.hpp"
#include "wsvd/pipeline.hpp"
#include "wsvd/quant.hpp"
#include "wsvd/rng.hpp"

namespace {

using json = nlohmann::ordered_json;
namespace fs = std::filesystem;
using namespace wsvd;

constexpr std::uint64_t kStreamBench = 5;

std::optional<fs::path> env_out_dir() {
    const char* v = std::getenv("WSVD_OUT_DIR");
    if (v != nullptr && *v != '\0') return fs::path(v);
    return std::nullopt;
}

fs::path resolve_out_dir(const std::string& flag_value) {
    if (auto env = env_out_dir()) return *env;
    return fs::path(flag_value);
}

struct Slot {
    std::size_t layer = 0;
    std::size_t head = 0;
    factorize::Role role = factorize::Role::Q;
};

std::vector<Slot> head_slots(const toy::ModelConfig& cfg) {
    std::vector<Slot> slots;
    for (std::size_t li = 0; li < cfg.n_layers; ++li) {
        for (std::size_t h = 0; h < cfg.n_heads; ++h) {
            for (factorize::Role role :
                 {factorize::Role::Q, factorize::Role::K, factorize::Role::V}) {
                slots.push_back({li, h, role});
            }
        }
    }
    return slots;
}

const Matrix& role_weight(const toy::AttentionWeights& w, std::size_t layer,
                          factorize::Role role) {
    switch (role) {
        case factorize::Role::Q: return w.layers[layer].w_q;
        case factorize::Role::K: return w.layers[layer].w_k;
        case factorize::Role::V: return w.layers[layer].w_v;
    }
    throw ConfigError("bad role");
}

std::string role_weight_name(std::size_t layer, factorize::Role role) {
    const toy::WeightKind kind = role == factorize::Role::Q   ? toy::WeightKind::Q
                                 : role == factorize::Role::K ? toy::WeightKind::K
                                                              : toy::WeightKind::V;
    return toy::weight_name({layer, kind});
}

factorize::HeadFactors& slot_factors(std::vector<decode::LayerFactors>& f, const Slot& s) {
    decode::HeadProjection& hp = f[s.layer].heads[s.head];
    switch (s.role) {
        case factorize::Role::Q: return hp.q;
        case factorize::Role::K: return hp.k;
        case factorize::Role::V: return hp.v;
    }
    throw ConfigError("bad role");
}

const Matrix& fisher_slice_source(const ckpt::FisherArtifacts& fa, const std::string& name,
                                  bool rotated) {
    const auto& group = rotated ? fa.rotated : fa.scores;
    const auto it = group.find(name);
    if (it == group.end()) {
        throw ConfigError("importance scores for " + name + (rotated ? " (rotated)" : "") +
                          " are missing from the given --fisher directory");
    }
    return it->second;
}

// ---- compress ----

struct CompressOpts {
    double rho1 = 0.6;
    bool uniform_rank = false;
    std::string in;
    std::string out;
    std::string fisher;
    std::size_t jobs = 1;
};

void run_compress(const CompressOpts& o) {
    const ckpt::Checkpoint in = ckpt::load(o.in);
    const toy::ModelConfig& mc = in.config;
    ckpt::FisherArtifacts fa;
    if (!o.fisher.empty()) fa = ckpt::load_fisher(o.fisher);

    const std::vector<Slot> slots = head_slots(mc);
    std::vector<SvdResult> svds(slots.size());
    parallel_for(slots.size(), o.jobs, [&](std::size_t i) {
        const Slot& s = slots[i];
        svds[i] =
            svd(factorize::head_slice(role_weight(in.dense, s.layer, s.role), s.head, mc.head_dim));
    });
    std::vector<factorize::HeadEnergy> energies(slots.size());
    for (std::size_t i = 0; i < slots.size(); ++i) {
        const Slot& s = slots[i];
        double weight = 1.0;
        if (!o.fisher.empty()) {
            const Matrix fslice = factorize::head_slice(
                fisher_slice_source(fa, role_weight_name(s.layer, s.role), false), s.head,
                mc.head_dim);
            weight = fslice.sum() / static_cast<double>(fslice.rows() * fslice.cols());
        }
        energies[i] = {s.layer, s.head, s.role, svds[i].sigma, weight};
    }
    const factorize::RankPlan plan =
        factorize::allocate_ranks(energies, mc.embed_dim, mc.head_dim, o.rho1, o.uniform_rank);

    ckpt::Checkpoint out;
    out.stage = ckpt::Stage::Factored;
    out.config = mc;
    out.dense = in.dense;
    out.factors.resize(mc.n_layers);
    for (decode::LayerFactors& lf : out.factors) {
        lf.embed_dim = mc.embed_dim;
        lf.head_dim = mc.head_dim;
        lf.heads.resize(mc.n_heads);
    }
    for (std::size_t i = 0; i < slots.size(); ++i) {
        const Slot& s = slots[i];
        const std::size_t rank = plan.rank_of(s.layer, s.role, s.head);
        auto [a, b] = truncate(svds[i], rank);
        slot_factors(out.factors, s) = {std::move(a), std::move(b), rank, s.layer, s.head, s.role};
    }
    const fs::path out_dir = resolve_out_dir(o.out);
    ckpt::save(out_dir, out);

    json rp;
    rp["target_rho1"] = plan.target_rho1;
    rp["achieved_rho1"] = plan.achieved_rho1;
    rp["achieved_rho2"] = plan.achieved_rho2;
    rp["uniform"] = plan.uniform;
    json entries = json::array();
    for (const auto& e : plan.entries) {
        entries.push_back(json{{"layer", e.layer},
                               {"head", e.head},
                               {"role", factorize::role_name(e.role)},
                               {"rank", e.rank}});
    }
    rp["entries"] = entries;
    ckpt::write_json(out_dir / "rank_plan.json", rp);

    std::cout << "factored " << slots.size() << " heads: target rho1 " << plan.target_rho1
              << ", achieved rho1 " << plan.achieved_rho1 << ", mean rank/head_dim "
              << plan.achieved_rho2 << "\n"
              << "wrote " << (out_dir / "manifest.json").string() << "\n";
}

// ---- finetune ----

struct FinetuneOpts {
    std::size_t steps = 100;
    double lr = 1e-4;
    std::string fisher;
    std::string in;
    std::string out;
    std::size_t jobs = 1;
};

void run_finetune(const FinetuneOpts& o) {
    ckpt::Checkpoint c = ckpt::load(o.in);
    if (c.factors.empty()) {
        throw ConfigError("checkpoint " + o.in + " has no factors; run compress first");
    }
    const toy::ModelConfig& mc = c.config;
    const ckpt::FisherArtifacts fa = ckpt::load_fisher(o.fisher);
    const std::vector<Slot> slots = head_slots(mc);

    std::vector<factorize::HeadFactors> tuned(slots.size());
    std::vector<factorize::FinetuneReport> reports(slots.size());
    const factorize::FinetuneOptions opts{o.steps, o.lr};
    parallel_for(slots.size(), o.jobs, [&](std::size_t i) {
        const Slot& s = slots[i];
        const Matrix target =
            factorize::head_slice(role_weight(c.dense, s.layer, s.role), s.head, mc.head_dim);
        const Matrix fslice = factorize::head_slice(
            fisher_slice_source(fa, role_weight_name(s.layer, s.role), false), s.head,
            mc.head_dim);
        auto [nf, rep] =
            factorize::weighted_finetune(slot_factors(c.factors, s), target, fslice, opts);
        tuned[i] = std::move(nf);
        reports[i] = std::move(rep);
    });
    double init_sum = 0.0;
    double final_sum = 0.0;
    json heads = json::array();
    for (std::size_t i = 0; i < slots.size(); ++i) {
        const Slot& s = slots[i];
        slot_factors(c.factors, s) = std::move(tuned[i]);
        const factorize::FinetuneReport& r = reports[i];
        init_sum += r.initial_loss;
        final_sum += r.final_loss;
        heads.push_back(json{{"layer", s.layer},
                             {"head", s.head},
                             {"role", factorize::role_name(s.role)},
                             {"rank", slot_factors(c.factors, s).rank},
                             {"initial_loss", r.initial_loss},
                             {"final_loss", r.final_loss},
                             {"steps", r.step_count},
                             {"aborted", r.aborted}});
    }
    c.stage = ckpt::Stage::Finetuned;
    const fs::path out_dir = resolve_out_dir(o.out);
    ckpt::save(out_dir, c);
    ckpt::write_json(out_dir / "finetune_report.json", json{{"heads", heads}});

    const auto n = static_cast<double>(slots.size());
    std::cout << "fine-tuned " << slots.size() << " heads for " << o.steps
              << " steps: mean weighted loss " << init_sum / n << " -> " << final_sum / n << "\n"
              << "wrote " << (out_dir / "manifest.json").string() << "\n";
}

// ---- qat ----

struct QatOpts {
    int wbits = 8;
    int abits = 8;
    std::size_t steps = 50;
    double lr = 1e-5;
    std::string fisher;
    std::string in;
    std::string out;
    std::size_t jobs = 1;
};

void run_qat(const QatOpts& o) {
    ckpt::Checkpoint c = ckpt::load(o.in);
    if (c.factors.empty()) {
        throw ConfigError("checkpoint " + o.in + " has no factors; run compress first");
    }
    const toy::ModelConfig& mc = c.config;
    const ckpt::FisherArtifacts fa = ckpt::load_fisher(o.fisher);
    const std::vector<Slot> slots = head_slots(mc);
    const Matrix s1 = hadamard(mc.embed_dim);

    quant::QatOptions opts;
    opts.steps = o.steps;
    opts.lr = o.lr;
    opts.spec.weight_bits = o.wbits;
    opts.spec.activation_bits = o.abits;
    opts.spec.validate();

    std::vector<quant::QatResult> results(slots.size());
    parallel_for(slots.size(), o.jobs, [&](std::size_t i) {
        const Slot& s = slots[i];
        const Matrix target =
            factorize::head_slice(role_weight(c.dense, s.layer, s.role), s.head, mc.head_dim);
        const Matrix frot = factorize::head_slice(
            fisher_slice_source(fa, role_weight_name(s.layer, s.role), true), s.head, mc.head_dim);
        results[i] = quant::local_qat(slot_factors(c.factors, s), s1, target, frot, opts);
    });

    ckpt::Checkpoint out;
    out.stage = ckpt::Stage::Quantized;
    out.config = mc;
    out.dense = c.dense;
    out.factors.resize(mc.n_layers);
    for (decode::LayerFactors& lf : out.factors) {
        lf.embed_dim = mc.embed_dim;
        lf.head_dim = mc.head_dim;
        lf.heads.resize(mc.n_heads);
    }
    out.quantized.assign(mc.n_layers, ckpt::LayerQuant{});
    for (ckpt::LayerQuant& lq : out.quantized) lq.heads.resize(mc.n_heads);
    double init_sum = 0.0;
    double final_sum = 0.0;
    double max_defect = 0.0;
    json heads = json::array();
    for (std::size_t i = 0; i < slots.size(); ++i) {
        const Slot& s = slots[i];
        slot_factors(out.factors, s) = results[i].factors;
        ckpt::HeadQuant& hq = out.quantized[s.layer].heads[s.head];
        switch (s.role) {
            case factorize::Role::Q: hq.q = results[i].quantized; break;
            case factorize::Role::K: hq.k = results[i].quantized; break;
            case factorize::Role::V: hq.v = results[i].quantized; break;
        }
        const factorize::FinetuneReport& r = results[i].report;
        init_sum += r.initial_loss;
        final_sum += r.final_loss;
        max_defect = std::max(max_defect, results[i].max_s2_defect);
        heads.push_back(json{{"layer", s.layer},
                             {"head", s.head},
                             {"role", factorize::role_name(s.role)},
                             {"rank", results[i].quantized.rank},
                             {"initial_loss", r.initial_loss},
                             {"final_loss", r.final_loss},
                             {"steps", r.step_count},
                             {"aborted", r.aborted},
                             {"max_s2_defect", results[i].max_s2_defect}});
    }
    out.weight_bits = o.wbits;
    out.activation_bits = o.abits;
    const fs::path out_dir = resolve_out_dir(o.out);
    ckpt::save(out_dir, out);
    ckpt::write_json(out_dir / "qat_report.json", json{{"heads", heads}});

    const auto n = static_cast<double>(slots.size());
    std::cout << "quantization-aware tuning of " << slots.size() << " heads (W" << o.wbits << "A"
              << o.abits << "): mean weighted loss " << init_sum / n << " -> " << final_sum / n
              << ", max rotation defect " << max_defect << "\n"
              << "wrote " << (out_dir / "manifest.json").string() << "\n";
}

// ---- decode-bench ----

struct BenchOpts {
    std::string mode = "fused";
    std::size_t seq_len = 256;
    std::size_t tile = 32;
    std::size_t heads = 1;
    std::size_t embed_dim = 128;
    std::size_t head_dim = 32;
    std::size_t rank = 8;
    std::size_t shared_rank = 0; // 0 -> heads * rank
    std::uint64_t seed = 0;
    std::string report;
    std::uint64_t batch = 1;
    bool materialize = false;
};

void run_bench(const BenchOpts& o) {
    const decode::Mode mode = decode::mode_from_name(o.mode);
    if (o.seq_len == 0) throw ConfigError("--L must be >= 1");
    if (o.heads == 0) throw ConfigError("--heads must be >= 1");
    if (o.rank == 0) throw ConfigError("--r must be >= 1");
    if (o.batch == 0) throw ConfigError("--batch must be >= 1");
    const std::size_t shared = o.shared_rank == 0 ? o.heads * o.rank : o.shared_rank;

    Rng rng = Rng::stream(o.seed, kStreamBench);
    const double a_std = 1.0 / std::sqrt(static_cast<double>(o.embed_dim));
    const double b_std = 1.0 / std::sqrt(static_cast<double>(o.rank));

    decode::TrafficCounter counter;
    const decode::TileConfig tiles{o.tile};
    double wall_ms = 0.0;

    const auto timed = [&](auto&& fn) {
        const auto t0 = std::chrono::steady_clock::now();
        fn();
        const auto t1 = std::chrono::steady_clock::now();
        wall_ms = std::chrono::duration<double, std::milli>(t1 - t0).count();
    };

    if (mode == decode::Mode::Fused) {
        decode::LayerFactors f;
        f.embed_dim = o.embed_dim;
        f.head_dim = o.head_dim;
        for (std::size_t h = 0; h < o.heads; ++h) {
            decode::HeadProjection p;
            for (factorize::HeadFactors* hf : {&p.q, &p.k, &p.v}) {
                hf->a = rng.normal_matrix(o.embed_dim, o.rank, a_std);
                hf->b = rng.normal_matrix(o.rank, o.head_dim, b_std);
                hf->rank = o.rank;
                hf->head = h;
            }
            p.q.role = factorize::Role::Q;
            p.k.role = factorize::Role::K;
            p.v.role = factorize::Role::V;
            f.heads.push_back(std::move(p));
        }
        decode::LatentCache cache(f);
        for (std::size_t t = 0; t < o.seq_len; ++t) {
            const Matrix x = rng.normal_matrix(1, o.embed_dim);
            decode::append_token(cache, f, x.row(0));
        }
        const Matrix q_heads = rng.normal_matrix(o.heads, o.head_dim);
        timed([&] { decode::fused_decode_step(cache, f, q_heads, tiles, counter); });
    } else if (mode == decode::Mode::SharedLatent) {
        decode::SharedFactors f;
        f.a_k = rng.normal_matrix(o.embed_dim, shared, a_std);
        f.a_v = rng.normal_matrix(o.embed_dim, shared, a_std);
        f.b_k = rng.normal_matrix(shared, o.heads * o.head_dim,
                                  1.0 / std::sqrt(static_cast<double>(shared)));
        f.b_v = rng.normal_matrix(shared, o.heads * o.head_dim,
                                  1.0 / std::sqrt(static_cast<double>(shared)));
        f.head_dim = o.head_dim;
        f.n_heads = o.heads;
        decode::SharedLatentCache cache;
        for (std::size_t t = 0; t < o.seq_len; ++t) {
            const Matrix x = rng.normal_matrix(1, o.embed_dim);
            decode::append_token_shared(cache, f, x.row(0));
        }
        const Matrix q_heads = rng.normal_matrix(o.heads, o.head_dim);
        timed([&] {
            decode::shared_decode_step(cache, f, q_heads, tiles, counter, o.materialize);
        });
    } else {
        decode::DenseProjections w;
        w.w_q = rng.normal_matrix(o.embed_dim, o.heads * o.head_dim, a_std);
        w.w_k = rng.normal_matrix(o.embed_dim, o.heads * o.head_dim, a_std);
        w.w_v = rng.normal_matrix(o.embed_dim, o.heads * o.head_dim, a_std);
        w.head_dim = o.head_dim;
        decode::FullKvCache cache(o.heads, o.head_dim);
        for (std::size_t t = 0; t < o.seq_len; ++t) {
            const Matrix x = rng.normal_matrix(1, o.embed_dim);
            decode::append_token_dense(cache, w, x.row(0));
        }
        const Matrix q_heads = rng.normal_matrix(o.heads, o.head_dim);
        if (mode == decode::Mode::Eager) {
            timed([&] { decode::eager_decode_step(cache, q_heads, counter); });
        } else {
            timed([&] { decode::flash_decode_step(cache, q_heads, tiles, counter); });
        }
    }

    const decode::TrafficReport tr = decode::traffic_report(mode, counter, o.seq_len, o.heads,
                                                            o.head_dim, o.rank, shared);
    // footprint ratios of the benched layout: the shared cache is sized
    // against the embedding width, the per-head layouts against the head
    cost::RhoRatios rr;
    if (mode == decode::Mode::SharedLatent) {
        rr.rho1 = cost::Ratio::of(static_cast<long long>(2 * shared),
                                  static_cast<long long>(o.embed_dim));
        rr.rho2 = cost::Ratio::of(static_cast<long long>(shared),
                                  static_cast<long long>(o.embed_dim));
    } else {
        rr = cost::rho(o.embed_dim, o.head_dim,
                       mode == decode::Mode::Fused ? o.rank : o.head_dim);
    }

    json rep;
    rep["mode"] = o.mode;
    rep["config"] = json{{"L", o.seq_len},       {"tile", o.tile},
                         {"heads", o.heads},     {"E", o.embed_dim},
                         {"H", o.head_dim},      {"r", o.rank},
                         {"R", shared},          {"seed", o.seed},
                         {"batch", o.batch},     {"materialize", o.materialize}};
    json counters;
    for (std::size_t i = 0; i < decode::kStreamCount; ++i) {
        const auto s = static_cast<decode::Stream>(i);
        const decode::StreamTally& t = counter[s];
        counters[decode::stream_name(s)] = json{{"loads", t.loads * o.batch},
                                                {"stores", t.stores * o.batch},
                                                {"flops", t.flops * o.batch}};
    }
    rep["counters"] = counters;
    rep["analytic"] = json{{"gamma", tr.analytic_gamma},
                           {"eta", tr.analytic_eta},
                           {"rho1", rr.rho1.value()},
                           {"rho2", rr.rho2.value()}};
    rep["match"] = tr.match;
    rep["wall_ms"] = wall_ms;

    std::cout << rep.dump(2) << "\n";
    if (!o.report.empty()) {
        fs::path report_path(o.report);
        if (auto env = env_out_dir()) report_path = *env / report_path.filename();
        ckpt::write_json(report_path, rep);
    }
    if (!tr.match) {
        throw NumericError("measured traffic disagrees with the analytic per-head counts");
    }
}

// ---- report --analytic ----

struct ReportOpts {
    bool analytic = false;
    std::uint64_t embed_dim = 4096;
    std::uint64_t head_dim = 128;
};

void run_report(const ReportOpts& o) {
    if (!o.analytic) {
        throw ConfigError("report currently only supports --analytic");
    }
    const double targets[] = {0.9, 0.7, 0.5};
    std::cout << "rho2_target,L,r,R,rho1,rho2,gamma_per_head,eta_per_head,gamma_shared,"
                 "eta_shared,per_head_over_shared\n";
    for (const double t : targets) {
        const auto r = static_cast<std::uint64_t>(std::llround(t * static_cast<double>(o.head_dim)));
        const auto rs =
            static_cast<std::uint64_t>(std::llround(t * static_cast<double>(o.embed_dim)));
        const cost::RhoRatios rr = cost::rho(o.embed_dim, o.head_dim, r);
        const cost::Ratio ratio = cost::Ratio::of(static_cast<long long>(r),
                                                  static_cast<long long>(rs));
        for (std::uint64_t len = 1024; len <= 32768; len *= 2) {
            const cost::CostInputs in{o.embed_dim, o.head_dim, len, r, rs};
            const cost::GammaEta ge = cost::gamma_eta(in);
            std::cout << t << ',' << len << ',' << r << ',' << rs << ',' << rr.rho1.str() << ','
                      << rr.rho2.str() << ',' << ge.gamma_per_head << ',' << ge.eta_per_head << ','
                      << ge.gamma_shared << ',' << ge.eta_shared << ',' << ratio.str() << "\n";
        }
    }
}

// ---- pipeline ----

struct PipelineOpts {
    std::string config;
    std::string out;
    std::size_t jobs = 0; // 0 -> keep config value
};

void run_pipeline_cmd(const PipelineOpts& o) {
    pipe::PipelineConfig cfg = pipe::config_from_file(o.config);
    if (!o.out.empty()) cfg.out_dir = o.out;
    if (auto env = env_out_dir()) cfg.out_dir = *env;
    if (o.jobs != 0) cfg.jobs = o.jobs;
    const pipe::PipelineResult res = pipe::run_pipeline(cfg);
    std::cout << "stages computed:";
    for (const std::string& s : res.stages_run) std::cout << ' ' << s;
    if (!res.stages_loaded.empty()) {
        std::cout << "\nstages restored:";
        for (const std::string& s : res.stages_loaded) std::cout << ' ' << s;
    }
    std::cout << "\nachieved rho1 " << res.achieved_rho1 << ", rho2 " << res.achieved_rho2
              << "\nweighted loss " << res.ft_mean_initial << " -> " << res.ft_mean_final
              << " (mean over heads)"
              << "\nfused vs dense decode max |diff| " << res.decode_max_abs_diff
              << "\nreport: " << res.report_path.string() << "\n";
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{
        "Per-head low-rank attention toolkit: truncated factorization, importance-weighted "
        "fine-tuning, rotation-aware quantization, and latent-cache decoding benchmarks."};
    app.require_subcommand(1);

    CompressOpts copts;
    CLI::App* compress = app.add_subcommand("compress", "Factor each attention head under a "
                                                        "parameter budget");
    compress->add_option("--rho1", copts.rho1,
                         "parameter budget per head, (E+H)*r/(E*H); up to 1+H/E")
        ->capture_default_str();
    compress->add_flag("--uniform-rank", copts.uniform_rank,
                       "same rank everywhere instead of greedy allocation");
    compress->add_option("--in", copts.in, "input checkpoint directory")->required();
    compress->add_option("--out", copts.out, "output checkpoint directory")->required();
    compress->add_option("--fisher", copts.fisher,
                         "importance-score directory weighting the allocator");
    compress->add_option("--jobs", copts.jobs, "worker threads")->capture_default_str();
    compress->callback([&] { run_compress(copts); });

    FinetuneOpts fopts;
    CLI::App* finetune =
        app.add_subcommand("finetune", "Weighted local reconstruction training per head");
    finetune->add_option("--steps", fopts.steps, "optimizer steps per head")
        ->capture_default_str();
    finetune->add_option("--lr", fopts.lr, "learning rate")->capture_default_str();
    finetune->add_option("--fisher", fopts.fisher, "importance-score directory")->required();
    finetune->add_option("--in", fopts.in, "factored checkpoint directory")->required();
    finetune->add_option("--out", fopts.out, "output checkpoint directory")->required();
    finetune->add_option("--jobs", fopts.jobs, "worker threads")->capture_default_str();
    finetune->callback([&] { run_finetune(fopts); });

    QatOpts qopts;
    CLI::App* qat = app.add_subcommand(
        "qat", "Rotation-aware low-bit training of the factored heads");
    qat->add_option("--wbits", qopts.wbits, "weight bits (4 or 8)")->capture_default_str();
    qat->add_option("--abits", qopts.abits, "activation bits (4 or 8)")->capture_default_str();
    qat->add_option("--steps", qopts.steps, "optimizer steps per head")->capture_default_str();
    qat->add_option("--lr", qopts.lr, "learning rate")->capture_default_str();
    qat->add_option("--fisher", qopts.fisher,
                    "importance-score directory (rotated scores required)")
        ->required();
    qat->add_option("--in", qopts.in, "factored or fine-tuned checkpoint directory")->required();
    qat->add_option("--out", qopts.out, "output checkpoint directory")->required();
    qat->add_option("--jobs", qopts.jobs, "worker threads")->capture_default_str();
    qat->callback([&] { run_qat(qopts); });

    BenchOpts bopts;
    CLI::App* bench = app.add_subcommand(
        "decode-bench", "Count memory traffic of one decode step over a prefilled cache");
    bench->add_option("--mode", bopts.mode, "fused|eager|flash_full|shared_latent")
        ->capture_default_str();
    bench->add_option("--L", bopts.seq_len, "cached sequence length")->capture_default_str();
    bench->add_option("--tile", bopts.tile, "tile length")->capture_default_str();
    bench->add_option("--heads", bopts.heads, "number of heads")->capture_default_str();
    bench->add_option("--E", bopts.embed_dim, "embedding width")->capture_default_str();
    bench->add_option("--H", bopts.head_dim, "head width")->capture_default_str();
    bench->add_option("--r", bopts.rank, "per-head latent rank")->capture_default_str();
    bench->add_option("--R", bopts.shared_rank, "shared latent rank (0 = heads*r)")
        ->capture_default_str();
    bench->add_option("--seed", bopts.seed, "random seed")->capture_default_str();
    bench->add_option("--report", bopts.report, "write the JSON report to this file");
    bench->add_option("--batch", bopts.batch, "multiply reported counters by this factor")
        ->capture_default_str();
    bench->add_flag("--materialize", bopts.materialize,
                    "shared_latent only: write back and reload full keys/values");
    bench->callback([&] { run_bench(bopts); });

    ReportOpts ropts;
    CLI::App* report = app.add_subcommand("report", "Analytic cost tables");
    report->add_flag("--analytic", ropts.analytic,
                     "print the sequence-length sweep as CSV (exact rationals)");
    report->add_option("--E", ropts.embed_dim, "embedding width")->capture_default_str();
    report->add_option("--H", ropts.head_dim, "head width")->capture_default_str();
    report->callback([&] { run_report(ropts); });

    PipelineOpts popts;
    CLI::App* pipeline =
        app.add_subcommand("pipeline", "Run the full stack end-to-end from a JSON config");
    pipeline->add_option("--config", popts.config, "pipeline config JSON file")->required();
    pipeline->add_option("--out", popts.out, "override the output directory");
    pipeline->add_option("--jobs", popts.jobs, "override worker threads");
    pipeline->callback([&] { run_pipeline_cmd(popts); });

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 2;
    } catch (const wsvd::ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const wsvd::ShapeError& e) {
        std::cerr << "shape error: " << e.what() << "\n";
        return 2;
    } catch (const wsvd::NumericError& e) {
        std::cerr << "numeric error: " << e.what() << "\n";
        return 3;
    } catch (const wsvd::IoError& e) {
        std::cerr << "io error: " << e.what() << "\n";
        return 4;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
