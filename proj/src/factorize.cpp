#include "wsvd/factorize.hpp"

#include <algorithm>
#include <cmath>

#include "wsvd/errors.hpp"
#include "wsvd/linalg.hpp"
#include "wsvd/optim.hpp"

namespace wsvd::factorize {

const char* role_name(Role r) {
    switch (r) {
        case Role::Q: return "q";
        case Role::K: return "k";
        case Role::V: return "v";
    }
    return "?";
}

Role role_from_name(const std::string& name) {
    if (name == "q") return Role::Q;
    if (name == "k") return Role::K;
    if (name == "v") return Role::V;
    throw ConfigError("unknown projection role '" + name + "'");
}

Matrix head_slice(const Matrix& w_full, std::size_t head, std::size_t head_dim) {
    if (head_dim == 0 || (head + 1) * head_dim > w_full.cols()) {
        throw ShapeError("head " + std::to_string(head) + " of width " + std::to_string(head_dim) +
                         " out of range for " + std::to_string(w_full.rows()) + "x" +
                         std::to_string(w_full.cols()) + " projection");
    }
    return w_full.col_block(head * head_dim, head_dim);
}

HeadFactors per_head_svd(const Matrix& w_full, std::size_t layer, Role role, std::size_t head,
                         std::size_t head_dim, std::size_t rank) {
    Matrix slice = head_slice(w_full, head, head_dim);
    if (rank < 1 || rank > std::min(slice.rows(), slice.cols())) {
        throw ShapeError("rank " + std::to_string(rank) + " outside [1, " +
                         std::to_string(std::min(slice.rows(), slice.cols())) + "] for a " +
                         std::to_string(slice.rows()) + "x" + std::to_string(slice.cols()) +
                         " head slice");
    }
    SvdResult s = svd(slice);
    auto [a, b] = truncate(s, rank);
    return HeadFactors{std::move(a), std::move(b), rank, layer, head, role};
}

std::size_t RankPlan::rank_of(std::size_t layer, Role role, std::size_t head) const {
    for (const Entry& e : entries) {
        if (e.layer == layer && e.role == role && e.head == head) return e.rank;
    }
    throw ConfigError("rank plan has no entry for layer " + std::to_string(layer) + " role " +
                      role_name(role) + " head " + std::to_string(head));
}

namespace {

int role_order(Role r) {
    switch (r) {
        case Role::Q: return 0;
        case Role::K: return 1;
        case Role::V: return 2;
    }
    return 3;
}

} // namespace

RankPlan allocate_ranks(const std::vector<HeadEnergy>& heads, std::size_t embed_dim,
                        std::size_t head_dim, double target_rho1, bool uniform_rank) {
    if (heads.empty()) throw ConfigError("rank allocation over zero heads");
    if (embed_dim == 0 || head_dim == 0 || head_dim > embed_dim) {
        throw ConfigError("rank allocation needs 0 < head_dim <= embed_dim");
    }
    const double unit = static_cast<double>(embed_dim + head_dim) /
                        static_cast<double>(embed_dim * head_dim); // rho1 cost of one rank unit
    const double max_rho1 = unit * static_cast<double>(head_dim);  // every head at full rank
    if (!(target_rho1 > 0.0) || target_rho1 > max_rho1 + 1e-12) {
        throw ConfigError("target rho1 " + std::to_string(target_rho1) + " outside (0, " +
                          std::to_string(max_rho1) + "]");
    }
    for (const HeadEnergy& h : heads) {
        if (h.sigma.empty()) {
            throw ConfigError("head energy entry without a spectrum");
        }
        if (!(h.fisher_weight >= 0.0)) {
            throw ConfigError("negative fisher weight for layer " + std::to_string(h.layer) +
                              " head " + std::to_string(h.head));
        }
    }

    const std::size_t n = heads.size();
    RankPlan plan;
    plan.target_rho1 = target_rho1;
    plan.uniform = uniform_rank;

    std::vector<std::size_t> ranks(n, 1);
    if (uniform_rank) {
        const auto r = static_cast<std::size_t>(std::llround(target_rho1 / unit));
        const std::size_t clamped = std::clamp<std::size_t>(r, 1, head_dim);
        std::fill(ranks.begin(), ranks.end(), clamped);
    } else {
        const auto total_units =
            static_cast<long long>(std::llround(target_rho1 / unit * static_cast<double>(n)));
        if (total_units < static_cast<long long>(n)) {
            throw ConfigError("rho1 " + std::to_string(target_rho1) +
                              " cannot give every head rank 1; minimum feasible rho1 is " +
                              std::to_string(unit));
        }
        long long remaining =
            std::min<long long>(total_units, static_cast<long long>(n * head_dim)) -
            static_cast<long long>(n);
        // marginal gain of raising head i from rank k to k+1 is its
        // fisher-weighted next singular energy
        auto gain = [&](std::size_t i) {
            const HeadEnergy& h = heads[i];
            if (ranks[i] >= head_dim || ranks[i] >= h.sigma.size()) {
                return ranks[i] >= head_dim ? -1.0 : 0.0; // full heads drop out, short spectra add nothing
            }
            const double s = h.sigma[ranks[i]];
            return h.fisher_weight * s * s;
        };
        while (remaining > 0) {
            std::size_t best = n;
            double best_gain = -1.0;
            for (std::size_t i = 0; i < n; ++i) {
                if (ranks[i] >= head_dim) continue;
                const double g = gain(i);
                bool better = g > best_gain;
                if (g == best_gain && best < n) {
                    // tie-break: lower layer, then role order q < k < v, then lower head
                    const HeadEnergy& a = heads[i];
                    const HeadEnergy& b = heads[best];
                    better = std::tuple(a.layer, role_order(a.role), a.head) <
                             std::tuple(b.layer, role_order(b.role), b.head);
                }
                if (better) {
                    best = i;
                    best_gain = g;
                }
            }
            if (best == n) break; // every head already at full rank
            ++ranks[best];
            --remaining;
        }
    }

    std::size_t total = 0;
    for (std::size_t i = 0; i < n; ++i) {
        plan.entries.push_back({heads[i].layer, heads[i].head, heads[i].role, ranks[i]});
        total += ranks[i];
    }
    plan.achieved_rho1 = unit * static_cast<double>(total) / static_cast<double>(n);
    plan.achieved_rho2 =
        static_cast<double>(total) / static_cast<double>(n * head_dim);
    if (!uniform_rank && std::abs(plan.achieved_rho1 - std::min(target_rho1, max_rho1)) > 0.02) {
        throw NumericError("allocated rho1 " + std::to_string(plan.achieved_rho1) +
                           " misses target " + std::to_string(target_rho1) + " by more than 0.02");
    }
    return plan;
}

double weighted_loss(const Matrix& w, const Matrix& fisher, const Matrix& a, const Matrix& b) {
    if (w.rows() != fisher.rows() || w.cols() != fisher.cols()) {
        throw ShapeError("weighted loss: target " + std::to_string(w.rows()) + "x" +
                         std::to_string(w.cols()) + " vs fisher " + std::to_string(fisher.rows()) +
                         "x" + std::to_string(fisher.cols()));
    }
    Matrix ab = matmul(a, b);
    if (ab.rows() != w.rows() || ab.cols() != w.cols()) {
        throw ShapeError("weighted loss: factors produce " + std::to_string(ab.rows()) + "x" +
                         std::to_string(ab.cols()) + " against target " +
                         std::to_string(w.rows()) + "x" + std::to_string(w.cols()));
    }
    double s = 0.0;
    for (std::size_t i = 0; i < w.size(); ++i) {
        const double d = w.data()[i] - ab.data()[i];
        s += fisher.data()[i] * d * d;
    }
    return s;
}

void weighted_loss_grads(const Matrix& w, const Matrix& fisher, const Matrix& a, const Matrix& b,
                         Matrix& ga, Matrix& gb) {
    Matrix res = matmul(a, b);
    if (res.rows() != w.rows() || res.cols() != w.cols() || fisher.rows() != w.rows() ||
        fisher.cols() != w.cols()) {
        throw ShapeError("weighted loss grads: target " + std::to_string(w.rows()) + "x" +
                         std::to_string(w.cols()) + ", fisher " + std::to_string(fisher.rows()) +
                         "x" + std::to_string(fisher.cols()) + ", factors produce " +
                         std::to_string(res.rows()) + "x" + std::to_string(res.cols()));
    }
    for (std::size_t i = 0; i < res.size(); ++i) {
        res.data()[i] = fisher.data()[i] * (w.data()[i] - res.data()[i]);
    }
    ga = matmul_nt(res, b);
    ga *= -2.0;
    gb = matmul_tn(a, res);
    gb *= -2.0;
}

std::pair<HeadFactors, FinetuneReport> weighted_finetune(const HeadFactors& factors,
                                                         const Matrix& w_target,
                                                         const Matrix& fisher,
                                                         const FinetuneOptions& opts) {
    for (std::size_t i = 0; i < fisher.size(); ++i) {
        if (!(fisher.data()[i] >= 0.0)) {
            throw NumericError("fisher scores must be nonnegative and finite");
        }
    }
    HeadFactors cur = factors;
    FinetuneReport rep;
    rep.learning_rate = opts.lr;

    double loss = weighted_loss(w_target, fisher, cur.a, cur.b);
    rep.initial_loss = loss;
    rep.trace.push_back(loss);

    HeadFactors best = cur;
    double best_loss = loss;

    AdamState opt_a(cur.a.rows(), cur.a.cols());
    AdamState opt_b(cur.b.rows(), cur.b.cols());
    Matrix ga, gb;
    for (std::size_t step = 0; step < opts.steps; ++step) {
        weighted_loss_grads(w_target, fisher, cur.a, cur.b, ga, gb);
        HeadFactors prev = cur;
        opt_a.step(cur.a, ga, opts.lr);
        opt_b.step(cur.b, gb, opts.lr);
        loss = weighted_loss(w_target, fisher, cur.a, cur.b);
        if (!std::isfinite(loss)) {
            rep.aborted = true;
            rep.diagnostic = "non-finite loss at step " + std::to_string(step + 1) +
                             "; returning last finite state";
            cur = std::move(prev);
            break;
        }
        rep.trace.push_back(loss);
        ++rep.step_count;
        if (loss < best_loss) {
            best_loss = loss;
            best = cur;
        }
    }
    rep.final_loss = best_loss;
    return {std::move(best), std::move(rep)};
}

} // namespace wsvd::factorize
