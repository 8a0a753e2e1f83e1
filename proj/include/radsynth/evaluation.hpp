#pragma once

// Quantitative evaluation: Fréchet distance between Gaussian feature
// summaries, corpus n-gram metrics (BLEU-1..4, CIDEr), ranking metrics
// (AUC, accuracy), and the two downstream augmentation experiment protocols
// at toy scale. Metric functions are pure; experiment runs are deterministic
// in their seeds.

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <cstring>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "radsynth/classifier.hpp"
#include "radsynth/data.hpp"
#include "radsynth/errors.hpp"
#include "radsynth/generator.hpp"
#include "radsynth/report_decoder.hpp"
#include "radsynth/tensor.hpp"

namespace radsynth::eval {

// ---------------------------------------------------------------------------
// distribution distance
// ---------------------------------------------------------------------------

struct GaussianSummary {
    Tensor mu;    // [d]
    Tensor sigma; // [d,d] symmetric
};

inline GaussianSummary fit_gaussian(const Tensor& feats) {
    if (feats.ndim() != 2) throw ConfigError("features must be an n x d matrix");
    const int n = feats.dim(0), d = feats.dim(1);
    if (n < 2) throw ConfigError("need >= 2 samples");
    GaussianSummary g{Tensor({d}), Tensor({d, d})};
    Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>> x(
        feats.data(), n, d);
    Eigen::VectorXd mu = x.colwise().mean();
    Eigen::MatrixXd centered = x.rowwise() - mu.transpose();
    Eigen::MatrixXd cov = centered.transpose() * centered / double(n - 1);
    cov = ((cov + cov.transpose()) / 2.0).eval();
    for (int j = 0; j < d; ++j) g.mu[j] = mu(j);
    for (int j = 0; j < d; ++j)
        for (int k = 0; k < d; ++k) g.sigma.at({j, k}) = cov(j, k);
    return g;
}

namespace detail {

// Square root of a symmetric PSD matrix by eigendecomposition. Negative
// eigenvalues are clamped to 0; their square-root magnitudes accumulate into
// `residue` (the imaginary mass the clamp discards) and the dominant
// real scale into `scale`, so the caller can budget the discard.
inline Eigen::MatrixXd psd_sqrt(const Eigen::MatrixXd& m, double& residue, double& scale) {
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(m);
    if (es.info() != Eigen::Success) throw NumericalError("eigendecomposition failed");
    Eigen::VectorXd lam = es.eigenvalues();
    for (int i = 0; i < lam.size(); ++i) {
        if (lam(i) < 0) {
            residue += std::sqrt(-lam(i));
            lam(i) = 0;
        }
    }
    scale = std::max(scale, lam.size() ? std::sqrt(lam.maxCoeff()) : 0.0);
    return es.eigenvectors() * lam.cwiseSqrt().asDiagonal() * es.eigenvectors().transpose();
}

inline Eigen::MatrixXd sigma_map(const GaussianSummary& s) {
    const int d = s.sigma.dim(0);
    Eigen::MatrixXd m(d, d);
    for (int i = 0; i < d; ++i)
        for (int j = 0; j < d; ++j) m(i, j) = s.sigma.at({i, j});
    return m;
}

} // namespace detail

// ‖mu_a − mu_b‖² + Tr(Sa + Sb − 2·(Sa·Sb)^{1/2}), the square root taken on the
// symmetrized product with eigenvalue clamping at 0. Clamped (imaginary)
// residue above 1e-6 of the dominant singular scale raises a numerical error.
inline double fid(const GaussianSummary& a, const GaussianSummary& b) {
    const int d = a.mu.dim(0);
    if (b.mu.dim(0) != d || a.sigma.dim(0) != d || a.sigma.dim(1) != d || b.sigma.dim(0) != d ||
        b.sigma.dim(1) != d)
        throw ConfigError("gaussian summary dimension mismatch");
    for (int i = 0; i < d; ++i)
        for (int j = i + 1; j < d; ++j) {
            if (std::fabs(a.sigma.at({i, j}) - a.sigma.at({j, i})) > 1e-8 ||
                std::fabs(b.sigma.at({i, j}) - b.sigma.at({j, i})) > 1e-8)
                throw ConfigError("covariance not symmetric");
        }

    double mean_term = 0.0;
    for (int i = 0; i < d; ++i) {
        const double diff = a.mu[i] - b.mu[i];
        mean_term += diff * diff;
    }

    Eigen::MatrixXd sa = detail::sigma_map(a), sb = detail::sigma_map(b);
    double residue = 0.0, scale = 0.0;
    Eigen::MatrixXd ra = detail::psd_sqrt(sa, residue, scale);
    Eigen::MatrixXd prod = ra * sb * ra;
    prod = ((prod + prod.transpose()) / 2.0).eval();

    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(prod);
    if (es.info() != Eigen::Success) throw NumericalError("eigendecomposition failed");
    double tr_sqrt = 0.0;
    for (int i = 0; i < d; ++i) {
        const double lam = es.eigenvalues()(i);
        if (lam < 0) {
            residue += std::sqrt(-lam); // imaginary magnitude of this root eigenvalue
            continue;
        }
        tr_sqrt += std::sqrt(lam);
        scale = std::max(scale, std::sqrt(lam));
    }
    if (residue > 1e-6 * std::max(1.0, scale))
        throw NumericalError("matrix square root has imaginary residue " + std::to_string(residue) +
                             " (scale " + std::to_string(scale) + ", d=" + std::to_string(d) + ")");
    return mean_term + sa.trace() + sb.trace() - 2.0 * tr_sqrt;
}

// Penultimate-layer activations of the toy classifier, batched; [n, feat_dim].
inline Tensor extract_features(const Tensor& images, const ToyClassifier& clf, int batch = 64) {
    if (!clf.trained) throw ConfigError("feature extractor is untrained");
    if (images.ndim() != 4) throw ConfigError("images must be [n,c,s,s]");
    const int n = images.dim(0);
    if (images.dim(1) != clf.cfg.in_channels || images.dim(2) != clf.cfg.image_size ||
        images.dim(3) != clf.cfg.image_size)
        throw ConfigError("image shape does not match the extractor");
    ad::NoGradGuard ng;
    Tensor out({n, clf.cfg.feat_dim});
    const long long plane = (long long)images.dim(1) * images.dim(2) * images.dim(3);
    auto& mclf = const_cast<ToyClassifier&>(clf);
    for (int i0 = 0; i0 < n; i0 += batch) {
        const int nb = std::min(batch, n - i0);
        Tensor xb({nb, images.dim(1), images.dim(2), images.dim(3)});
        std::memcpy(xb.data(), images.data() + i0 * plane, sizeof(double) * (size_t)(nb * plane));
        Tensor f = mclf.features(ad::leaf(xb)).val();
        std::memcpy(out.data() + (long long)i0 * clf.cfg.feat_dim, f.data(),
                    sizeof(double) * (size_t)f.size());
    }
    return out;
}

// ---------------------------------------------------------------------------
// text metrics
// ---------------------------------------------------------------------------

using TokenSeq = std::vector<int>;

namespace detail {

inline std::map<TokenSeq, int> ngram_counts(const TokenSeq& s, int n) {
    std::map<TokenSeq, int> c;
    for (int i = 0; i + n <= (int)s.size(); ++i)
        ++c[TokenSeq(s.begin() + i, s.begin() + i + n)];
    return c;
}

} // namespace detail

// Corpus-level BLEU-n: brevity penalty times the geometric mean of clipped
// modified precisions of orders 1..n. Zero precisions are replaced by eps;
// orders longer than every candidate are vacuous and contribute factor 1.
inline double corpus_bleu_n(const std::vector<TokenSeq>& cands,
                            const std::vector<std::vector<TokenSeq>>& refs, int n,
                            double eps = 1e-9) {
    if (n < 1 || n > 4) throw ConfigError("bleu order must be in 1..4");
    if (cands.empty() || cands.size() != refs.size())
        throw ConfigError("candidate/reference count mismatch");
    long long c_total = 0, r_total = 0;
    std::vector<long long> num((size_t)n, 0), den((size_t)n, 0);
    for (size_t i = 0; i < cands.size(); ++i) {
        const TokenSeq& c = cands[i];
        if (c.empty()) throw ConfigError("empty candidate");
        if (refs[i].empty()) throw ConfigError("empty references");
        for (const TokenSeq& r : refs[i])
            if (r.empty()) throw ConfigError("empty references");
        c_total += (long long)c.size();
        // closest reference length, ties toward the shorter
        long long best_r = (long long)refs[i][0].size();
        for (const TokenSeq& r : refs[i]) {
            const long long rl = (long long)r.size();
            const long long cl = (long long)c.size();
            if (std::llabs(rl - cl) < std::llabs(best_r - cl) ||
                (std::llabs(rl - cl) == std::llabs(best_r - cl) && rl < best_r))
                best_r = rl;
        }
        r_total += best_r;
        for (int k = 1; k <= n; ++k) {
            auto cc = detail::ngram_counts(c, k);
            std::map<TokenSeq, int> rmax;
            for (const TokenSeq& r : refs[i])
                for (const auto& [g, cnt] : detail::ngram_counts(r, k))
                    rmax[g] = std::max(rmax[g], cnt);
            for (const auto& [g, cnt] : cc) {
                auto it = rmax.find(g);
                num[(size_t)k - 1] += std::min(cnt, it == rmax.end() ? 0 : it->second);
            }
            den[(size_t)k - 1] += std::max<long long>(0, (long long)c.size() - k + 1);
        }
    }
    const double bp = c_total >= r_total ? 1.0 : std::exp(1.0 - (double)r_total / (double)c_total);
    double log_sum = 0.0;
    for (int k = 0; k < n; ++k) {
        if (den[(size_t)k] == 0) continue; // vacuous order
        const double p = (double)num[(size_t)k] / (double)den[(size_t)k];
        log_sum += std::log(p > 0 ? p : eps);
    }
    return bp * std::exp(log_sum / n);
}

inline double bleu_n(const TokenSeq& cand, const std::vector<TokenSeq>& refs, int n,
                     double eps = 1e-9) {
    return corpus_bleu_n({cand}, {refs}, n, eps);
}

// Plain CIDEr: mean over n=1..4 of the average TF-IDF cosine between the
// candidate and each reference, times 10. IDF is ln(N / df) over reference
// sets (df floored at 1). The optional flag adds the Gaussian length penalty
// and count clipping of the -D variant (sigma = 6).
inline double cider(const std::vector<TokenSeq>& cands,
                    const std::vector<std::vector<TokenSeq>>& refs,
                    bool d_variant = false) {
    const size_t n_docs = cands.size();
    if (n_docs == 0 || refs.size() != n_docs)
        throw ConfigError("candidate/reference count mismatch");
    std::set<std::vector<TokenSeq>> distinct;
    for (size_t i = 0; i < n_docs; ++i) {
        if (refs[i].empty()) throw ConfigError("empty references");
        distinct.insert(refs[i]);
    }
    if (distinct.size() < 2) throw ConfigError("IDF undefined");

    // document frequency per order: number of reference sets containing the n-gram
    std::vector<std::map<TokenSeq, int>> df(4);
    for (size_t i = 0; i < n_docs; ++i) {
        for (int k = 1; k <= 4; ++k) {
            std::set<TokenSeq> seen;
            for (const TokenSeq& r : refs[i])
                for (const auto& [g, cnt] : detail::ngram_counts(r, k)) seen.insert(g);
            for (const auto& g : seen) ++df[(size_t)k - 1][g];
        }
    }
    auto idf = [&](int k, const TokenSeq& g) {
        auto it = df[(size_t)k - 1].find(g);
        const int d = it == df[(size_t)k - 1].end() ? 0 : it->second;
        return std::log((double)n_docs / std::max(1, d));
    };
    auto tfidf = [&](const TokenSeq& s, int k) {
        std::map<TokenSeq, double> v;
        for (const auto& [g, cnt] : detail::ngram_counts(s, k)) v[g] = cnt * idf(k, g);
        return v;
    };
    auto norm = [](const std::map<TokenSeq, double>& v) {
        double s = 0.0;
        for (const auto& [g, x] : v) s += x * x;
        return std::sqrt(s);
    };

    double total = 0.0;
    for (size_t i = 0; i < n_docs; ++i) {
        double doc = 0.0;
        for (int k = 1; k <= 4; ++k) {
            std::map<TokenSeq, double> cv = tfidf(cands[i], k);
            const double cn = norm(cv);
            double sim_sum = 0.0;
            for (const TokenSeq& r : refs[i]) {
                std::map<TokenSeq, double> rv = tfidf(r, k);
                const double rn = norm(rv);
                if (cn == 0.0 || rn == 0.0) continue;
                double dot = 0.0;
                for (const auto& [g, x] : cv) {
                    auto it = rv.find(g);
                    if (it == rv.end()) continue;
                    dot += (d_variant ? std::min(x, it->second) : x) * it->second;
                }
                double sim = dot / (cn * rn);
                if (d_variant) {
                    const double dl = (double)cands[i].size() - (double)r.size();
                    sim *= std::exp(-dl * dl / (2.0 * 6.0 * 6.0));
                }
                sim_sum += sim;
            }
            doc += sim_sum / (double)refs[i].size();
        }
        total += 10.0 * doc / 4.0;
    }
    return total / (double)n_docs;
}

// ---------------------------------------------------------------------------
// ranking metrics
// ---------------------------------------------------------------------------

// Mann-Whitney AUC with average ranks for ties (each tied pair counts 1/2).
inline double auc(const std::vector<double>& scores, const std::vector<int>& labels) {
    if (scores.empty() || scores.size() != labels.size())
        throw ConfigError("score/label size mismatch");
    long long npos = 0;
    for (int l : labels) {
        if (l != 0 && l != 1) throw ConfigError("labels must be binary");
        npos += l;
    }
    const long long nneg = (long long)labels.size() - npos;
    if (npos == 0 || nneg == 0) throw ConfigError("auc needs both classes");
    std::vector<size_t> order(scores.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::sort(order.begin(), order.end(),
              [&](size_t a, size_t b) { return scores[a] < scores[b]; });
    double rank_sum_pos = 0.0;
    size_t i = 0;
    while (i < order.size()) {
        size_t j = i;
        while (j < order.size() && scores[order[j]] == scores[order[i]]) ++j;
        const double avg_rank = ((double)i + (double)j + 1.0) / 2.0; // 1-based average
        for (size_t k = i; k < j; ++k)
            if (labels[order[k]] == 1) rank_sum_pos += avg_rank;
        i = j;
    }
    const double u = rank_sum_pos - (double)npos * ((double)npos + 1.0) / 2.0;
    return u / ((double)npos * (double)nneg);
}

inline double accuracy(const std::vector<int>& preds, const std::vector<int>& labels) {
    if (preds.empty() || preds.size() != labels.size())
        throw ConfigError("prediction/label size mismatch");
    long long hit = 0;
    for (size_t i = 0; i < preds.size(); ++i) hit += preds[i] == labels[i];
    return (double)hit / (double)preds.size();
}

// Macro-averaged one-vs-rest AUC over classes present with both polarities.
inline double auc_macro(const Tensor& scores, const std::vector<int>& labels) {
    if (scores.ndim() != 2 || scores.dim(0) != (int)labels.size())
        throw ConfigError("score matrix must be [n, classes]");
    const int n = scores.dim(0), k = scores.dim(1);
    double sum = 0.0;
    int used = 0;
    for (int c = 0; c < k; ++c) {
        std::vector<double> col((size_t)n);
        std::vector<int> bin((size_t)n);
        int pos = 0;
        for (int i = 0; i < n; ++i) {
            col[(size_t)i] = scores.at({i, c});
            bin[(size_t)i] = labels[(size_t)i] == c ? 1 : 0;
            pos += bin[(size_t)i];
        }
        if (pos == 0 || pos == n) continue;
        sum += auc(col, bin);
        ++used;
    }
    if (used == 0) throw ConfigError("auc needs both classes");
    return sum / used;
}

// ---------------------------------------------------------------------------
// experiment protocols
// ---------------------------------------------------------------------------

struct MetricsReport {
    std::string experiment;
    std::uint64_t seed = 0;
    std::string extractor_id; // provenance of any fid value
    std::optional<double> fid, bleu1, bleu2, bleu3, bleu4, cider, auc, acc;

    nlohmann::json to_json() const {
        nlohmann::json j{{"experiment", experiment}, {"seed", seed}};
        if (!extractor_id.empty()) j["extractor_id"] = extractor_id;
        auto put = [&](const char* k, const std::optional<double>& v) {
            if (v) j[k] = *v;
        };
        put("fid", fid);
        put("bleu1", bleu1);
        put("bleu2", bleu2);
        put("bleu3", bleu3);
        put("bleu4", bleu4);
        put("cider", cider);
        put("auc", auc);
        put("acc", acc);
        return j;
    }
};

struct MixOutcome {
    std::string experiment;
    int synth_count = 0;
    std::vector<MetricsReport> runs; // one per seed
};

inline double metric_mean(const std::vector<MetricsReport>& runs,
                          std::optional<double> MetricsReport::* m) {
    double s = 0.0;
    int n = 0;
    for (const auto& r : runs)
        if (r.*m) {
            s += *(r.*m);
            ++n;
        }
    if (n == 0) throw ConfigError("metric absent from every run");
    return s / n;
}

inline double metric_sd(const std::vector<MetricsReport>& runs,
                        std::optional<double> MetricsReport::* m) {
    const double mu = metric_mean(runs, m);
    double s = 0.0;
    int n = 0;
    for (const auto& r : runs)
        if (r.*m) {
            s += (*(r.*m) - mu) * (*(r.*m) - mu);
            ++n;
        }
    return n < 2 ? 0.0 : std::sqrt(s / (n - 1));
}

struct ExperimentProtocol {
    int real_train = 200;
    int held_out = 200;
    int classifier_steps = 400;
    int batch_size = 32;
    double lr = 1e-3;
    int encoder_steps = 300; // captioner phase 1
    int decoder_steps = 400; // captioner phase 2
    double decoder_lr = 3e-3;
    int gen_batch = 64;
};

namespace detail {

inline std::uint64_t image_row_hash(const Tensor& images, int row) {
    const long long plane = images.size() / images.dim(0);
    return fnv1a64(images.data() + row * plane, sizeof(double) * (size_t)plane);
}

inline void check_split_disjoint(const Tensor& train, const Tensor& held) {
    std::set<std::uint64_t> seen;
    for (int i = 0; i < train.dim(0); ++i) seen.insert(image_row_hash(train, i));
    for (int i = 0; i < held.dim(0); ++i)
        if (seen.count(image_row_hash(held, i)))
            throw ConfigError("held-out sample duplicates a training sample");
}

inline std::vector<int> iota_range(int lo, int hi) {
    std::vector<int> v;
    for (int i = lo; i < hi; ++i) v.push_back(i);
    return v;
}

// class-balanced synthesis, chunked to bound activation memory
inline std::pair<Tensor, std::vector<int>> synthesize(Generator& g, int count, std::uint64_t seed,
                                                      int gen_batch) {
    const int k = g.cfg.class_count, s = g.cfg.image_size;
    Tensor images({count, 3, s, s});
    std::vector<int> labels((size_t)count);
    Rng zr(seed);
    const long long plane = 3LL * s * s;
    for (int i0 = 0; i0 < count; i0 += gen_batch) {
        const int nb = std::min(gen_batch, count - i0);
        Tensor z({nb, g.cfg.noise_dim});
        zr.fill_normal(z);
        Tensor y({nb, k});
        for (int i = 0; i < nb; ++i) {
            labels[(size_t)(i0 + i)] = (i0 + i) % k;
            y.at({i, (i0 + i) % k}) = 1.0;
        }
        Tensor xb = g.generate(z, y);
        std::memcpy(images.data() + i0 * plane, xb.data(), sizeof(double) * (size_t)xb.size());
    }
    return {images, labels};
}

inline Tensor concat_rows(const Tensor& a, const Tensor& b) {
    if (b.dim(0) == 0) return a.clone();
    std::vector<int> shape = a.shape();
    shape[0] = a.dim(0) + b.dim(0);
    Tensor out(shape);
    std::memcpy(out.data(), a.data(), sizeof(double) * (size_t)a.size());
    std::memcpy(out.data() + a.size(), b.data(), sizeof(double) * (size_t)b.size());
    return out;
}

} // namespace detail

// Flatten a tokenized report to the content tokens scored by text metrics;
// a report with no content collapses to the end-of-sentence marker so that
// metrics stay defined.
inline TokenSeq flatten_for_metrics(const data::Report& r) {
    TokenSeq out;
    for (const auto& sent : r)
        for (int id : sent)
            if (id != data::PAD && id != data::START && id != data::STOPS) out.push_back(id);
    if (out.empty()) out.push_back(data::STOPS);
    return out;
}

// Fresh-per-mix image->report model: classifier backbone trained on labels,
// then a decoder trained teacher-forced on frozen features.
struct Captioner {
    ToyClassifier encoder;
    ReportDecoder decoder;
};

inline Captioner train_captioner(const Tensor& images, const std::vector<int>& labels,
                                 const std::vector<data::Report>& reports,
                                 const ClassifierConfig& enc_cfg, DecoderConfig dec_cfg,
                                 std::uint64_t seed, const ExperimentProtocol& proto = {}) {
    if (images.dim(0) != (int)labels.size() || images.dim(0) != (int)reports.size())
        throw ConfigError("image/label/report count mismatch");
    Captioner cap;
    cap.encoder = train_classifier(images, labels, enc_cfg, seed, proto.encoder_steps,
                                   proto.batch_size, proto.lr);
    dec_cfg.feat_dim = enc_cfg.feat_dim;
    Rng rng(seed ^ 0x9e3779b97f4a7c15ull);
    cap.decoder.init(dec_cfg, rng);
    Tensor feats = extract_features(images, cap.encoder);
    auto ps = cap.decoder.params();
    nn::Adam opt;
    opt.lr = proto.decoder_lr;
    opt.beta1 = 0.9;
    opt.init(ps);
    const int n = images.dim(0), fd = enc_cfg.feat_dim;
    for (int step = 0; step < proto.decoder_steps; ++step) {
        const int nb = std::min(proto.batch_size, n);
        Tensor fb({nb, fd});
        std::vector<data::Report> rb((size_t)nb);
        for (int i = 0; i < nb; ++i) {
            const int pick = (int)rng.uniform_u64((std::uint64_t)n);
            std::memcpy(fb.data() + (long long)i * fd, feats.data() + (long long)pick * fd,
                        sizeof(double) * (size_t)fd);
            rb[(size_t)i] = reports[(size_t)pick];
        }
        opt.zero_grad(ps);
        auto loss = cap.decoder.teacher_forced_loss(ad::leaf(fb), rb);
        ad::backward(loss.total);
        opt.step(ps);
    }
    return cap;
}

inline std::vector<data::Report> caption(Captioner& cap, const Tensor& images) {
    return cap.decoder.decode(extract_features(images, cap.encoder));
}

// Image-classification augmentation: train a fresh classifier on real plus
// class-balanced synthetic images per mix and seed; score AUC/accuracy on a
// held-out real slice.
inline std::vector<MixOutcome> augmentation_experiment(const data::Dataset& real, Generator& g,
                                                       const std::vector<int>& synth_counts,
                                                       const ClassifierConfig& ccfg,
                                                       const std::vector<std::uint64_t>& seeds,
                                                       const ExperimentProtocol& proto = {}) {
    if (seeds.empty()) throw ConfigError("need at least one seed");
    if (synth_counts.empty()) throw ConfigError("need at least one mix");
    const int n = real.size();
    if (proto.real_train + proto.held_out > n)
        throw ConfigError("dataset too small for the requested split");
    data::Batch train_b = real.load_batch(detail::iota_range(0, proto.real_train));
    data::Batch held_b = real.load_batch(detail::iota_range(n - proto.held_out, n));
    detail::check_split_disjoint(train_b.images, held_b.images);

    std::vector<MixOutcome> out;
    for (int count : synth_counts) {
        MixOutcome mix;
        mix.synth_count = count;
        mix.experiment =
            "augmentation r" + std::to_string(proto.real_train) + "+s" + std::to_string(count);
        for (std::uint64_t seed : seeds) {
            Tensor images = train_b.images.clone();
            std::vector<int> labels = train_b.label_ids;
            if (count > 0) {
                auto [sx, sy] = detail::synthesize(g, count, seed, proto.gen_batch);
                images = detail::concat_rows(images, sx);
                labels.insert(labels.end(), sy.begin(), sy.end());
            }
            ToyClassifier clf = train_classifier(images, labels, ccfg, seed,
                                                 proto.classifier_steps, proto.batch_size, proto.lr);
            ad::NoGradGuard ng;
            Tensor logits = clf.logits(ad::leaf(held_b.images)).val();
            MetricsReport r;
            r.experiment = mix.experiment;
            r.seed = seed;
            r.acc = accuracy(ad::argmax_rows(logits), held_b.label_ids);
            r.auc = auc_macro(logits, held_b.label_ids);
            mix.runs.push_back(std::move(r));
        }
        out.push_back(std::move(mix));
    }
    return out;
}

// Report-generation augmentation: synthetic pairs come from the generator
// plus the trained image->report model; a fresh captioner is trained per mix
// and scored by CIDEr/BLEU against held-out real reports.
inline std::vector<MixOutcome> report_generation_experiment(
    const data::Dataset& real, Generator& g, Captioner& gan_f,
    const std::vector<int>& synth_counts, const ClassifierConfig& enc_cfg,
    const DecoderConfig& dec_cfg, const std::vector<std::uint64_t>& seeds,
    const ExperimentProtocol& proto = {}) {
    if (seeds.empty()) throw ConfigError("need at least one seed");
    if (synth_counts.empty()) throw ConfigError("need at least one mix");
    const int n = real.size();
    if (proto.real_train + proto.held_out > n)
        throw ConfigError("dataset too small for the requested split");
    data::Batch train_b = real.load_batch(detail::iota_range(0, proto.real_train));
    data::Batch held_b = real.load_batch(detail::iota_range(n - proto.held_out, n));
    detail::check_split_disjoint(train_b.images, held_b.images);

    std::vector<std::vector<TokenSeq>> held_refs;
    for (const auto& rep : held_b.reports) held_refs.push_back({flatten_for_metrics(rep)});

    std::vector<MixOutcome> out;
    for (int count : synth_counts) {
        MixOutcome mix;
        mix.synth_count = count;
        mix.experiment =
            "report-gen r" + std::to_string(proto.real_train) + "+s" + std::to_string(count);
        for (std::uint64_t seed : seeds) {
            Tensor images = train_b.images.clone();
            std::vector<int> labels = train_b.label_ids;
            std::vector<data::Report> reports = train_b.reports;
            if (count > 0) {
                auto [sx, sy] = detail::synthesize(g, count, seed, proto.gen_batch);
                std::vector<data::Report> sr = caption(gan_f, sx);
                images = detail::concat_rows(images, sx);
                labels.insert(labels.end(), sy.begin(), sy.end());
                reports.insert(reports.end(), sr.begin(), sr.end());
            }
            Captioner cap =
                train_captioner(images, labels, reports, enc_cfg, dec_cfg, seed, proto);
            std::vector<data::Report> decoded = caption(cap, held_b.images);
            std::vector<TokenSeq> cands;
            for (const auto& rep : decoded) cands.push_back(flatten_for_metrics(rep));
            MetricsReport r;
            r.experiment = mix.experiment;
            r.seed = seed;
            r.cider = cider(cands, held_refs);
            r.bleu1 = corpus_bleu_n(cands, held_refs, 1);
            r.bleu2 = corpus_bleu_n(cands, held_refs, 2);
            r.bleu3 = corpus_bleu_n(cands, held_refs, 3);
            r.bleu4 = corpus_bleu_n(cands, held_refs, 4);
            mix.runs.push_back(std::move(r));
        }
        out.push_back(std::move(mix));
    }
    return out;
}

} // namespace radsynth::eval
