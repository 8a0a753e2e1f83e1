#pragma once

// Hierarchical report decoder: a sentence-level LSTM emits a stop decision
// and a topic vector per sentence; a stacked word-level LSTM expands each
// topic into a sentence. Supports teacher-forced training, greedy/sampled
// decoding, and a soft relaxation that emits token distributions and feeds
// back expected embeddings, keeping the text path differentiable.

#include <algorithm>
#include <string>
#include <vector>

#include "radsynth/autodiff.hpp"
#include "radsynth/data.hpp"
#include "radsynth/errors.hpp"
#include "radsynth/nn.hpp"

namespace radsynth {

struct DecoderConfig {
    int feat_dim = 128;   // image-feature input width
    int sent_hidden = 64; // sentence LSTM width
    int topic_hidden = 64;
    int emb_dim = 64; // word embedding width; topics are emitted in this space
    int word_hidden = 64;
    int word_layers = 3;
    int vocab_size = 0;
    int t_max = 6;  // sentence cap
    int l_max = 16; // words per sentence cap, terminator included
    double stop_threshold = 0.5;

    int flat_cap() const { return t_max * l_max; } // fixed flattened layout

    void validate() const {
        if (vocab_size < 5) throw ConfigError("vocab_size must cover specials plus content");
        if (t_max < 1 || l_max < 2) throw ConfigError("t_max must be >= 1 and l_max >= 2");
        if (word_layers < 1) throw ConfigError("word_layers must be >= 1");
        if (feat_dim < 1 || sent_hidden < 1 || topic_hidden < 1 || emb_dim < 1 || word_hidden < 1)
            throw ConfigError("decoder widths must be positive");
        if (stop_threshold <= 0.0 || stop_threshold >= 1.0)
            throw ConfigError("stop_threshold must lie in (0,1)");
    }
};

// Flatten a report into the fixed layout: each sentence occupies l_max slots
// (tokens, then its terminator, then padding); unused sentences are padding.
inline std::vector<int> flatten_report(const data::Report& r, int t_max, int l_max) {
    std::vector<int> out((size_t)t_max * (size_t)l_max, data::PAD);
    const int sents = std::min((int)r.size(), t_max);
    for (int s = 0; s < sents; ++s) {
        const auto& sent = r[(size_t)s];
        const int words = std::min((int)sent.size(), l_max - 1);
        for (int k = 0; k < words; ++k) out[(size_t)(s * l_max + k)] = sent[(size_t)k];
        out[(size_t)(s * l_max + words)] = data::STOPS;
    }
    return out;
}

struct TeacherForcedLoss {
    ad::Var total, word_ce, stop_ce;
};

struct SoftDecode {
    ad::Var probs;                     // [N, flat_cap, vocab] token distributions
    std::vector<data::Report> reports; // argmax trace for logging/metrics
};

class ReportDecoder {
  public:
    DecoderConfig cfg;

    void init(const DecoderConfig& c, Rng& rng) {
        c.validate();
        cfg = c;
        sent_cell_.init("f.sent", c.feat_dim, c.sent_hidden, rng);
        stop_head_.init("f.stop", c.sent_hidden, 2, rng);
        topic_l1_.init("f.topic1", c.sent_hidden, c.topic_hidden, rng);
        topic_l2_.init("f.topic2", c.topic_hidden, c.topic_hidden, rng);
        topic_out_.init("f.topic_out", c.topic_hidden, c.emb_dim, rng);
        word_emb_.init("f.word_emb", c.vocab_size, c.emb_dim, rng);
        word_cells_.resize((size_t)c.word_layers);
        for (int l = 0; l < c.word_layers; ++l)
            word_cells_[(size_t)l].init("f.word" + std::to_string(l),
                                        l == 0 ? c.emb_dim : c.word_hidden, c.word_hidden, rng);
        out_head_.init("f.out", c.word_hidden, c.vocab_size, rng);
    }

    // Teacher-forced cross-entropy: word targets are each sentence's tokens
    // plus a terminator; stop targets are CONTINUE for every real sentence
    // index and STOP at the first unused one.
    TeacherForcedLoss teacher_forced_loss(const ad::Var& v, const std::vector<data::Report>& reports) {
        const int n = v.val().dim(0);
        if ((int)reports.size() != n) throw ConfigError("feature/report batch size mismatch");

        // clamp every report to the configured caps
        std::vector<std::vector<std::vector<int>>> tgt((size_t)n);
        int max_sents = 0;
        for (int i = 0; i < n; ++i) {
            const auto& r = reports[(size_t)i];
            const int sents = std::min((int)r.size(), cfg.t_max);
            for (int s = 0; s < sents; ++s) {
                std::vector<int> w(r[(size_t)s].begin(),
                                   r[(size_t)s].begin() +
                                       std::min((long long)r[(size_t)s].size(),
                                                (long long)cfg.l_max - 1));
                w.push_back(data::STOPS);
                tgt[(size_t)i].push_back(std::move(w));
            }
            max_sents = std::max(max_sents, sents);
        }
        // one extra sentence step carries the STOP target where it fits the cap
        const int stop_steps = std::min(max_sents + 1, cfg.t_max);

        auto sent_state = sent_cell_.zero_state(n);
        std::vector<ad::Var> stop_logits, word_logps;
        std::vector<int> stop_targets, word_targets;
        std::vector<double> stop_mask, word_mask;

        for (int s = 0; s < stop_steps; ++s) {
            sent_state = sent_cell_.fwd(v, sent_state);
            stop_logits.push_back(stop_head_.fwd(sent_state.h));
            for (int i = 0; i < n; ++i) {
                const int ti = (int)tgt[(size_t)i].size();
                if (s < ti) {
                    stop_targets.push_back(0); // CONTINUE
                    stop_mask.push_back(1.0);
                } else if (s == ti) {
                    stop_targets.push_back(1); // STOP
                    stop_mask.push_back(1.0);
                } else {
                    stop_targets.push_back(0);
                    stop_mask.push_back(0.0);
                }
            }
            if (s >= max_sents) continue; // pure stop step: no words

            // word-level unroll for sentence s across the batch
            ad::Var topic = topic_of(sent_state.h);
            int w_steps = 0;
            for (int i = 0; i < n; ++i)
                if (s < (int)tgt[(size_t)i].size())
                    w_steps = std::max(w_steps, (int)tgt[(size_t)i][(size_t)s].size());

            auto states = word_zero_states(n);
            word_stack_step(states, topic); // step 0 conditions on the topic
            std::vector<int> prev((size_t)n, data::START);
            for (int k = 0; k < w_steps; ++k) {
                ad::Var h = word_stack_step(states, word_emb_.fwd_ids(prev));
                word_logps.push_back(ad::log_softmax_rows(out_head_.fwd(h)));
                for (int i = 0; i < n; ++i) {
                    const bool active = s < (int)tgt[(size_t)i].size() &&
                                        k < (int)tgt[(size_t)i][(size_t)s].size();
                    const int t = active ? tgt[(size_t)i][(size_t)s][(size_t)k] : data::PAD;
                    word_targets.push_back(t);
                    word_mask.push_back(active ? 1.0 : 0.0);
                    prev[(size_t)i] = t;
                }
            }
        }

        TeacherForcedLoss out;
        out.stop_ce = ad::masked_nll(
            ad::log_softmax_rows(ad::reshape(ad::stack_steps(stop_logits), {n * stop_steps, 2})),
            reorder_steps(stop_targets, n, stop_steps),
            reorder_steps(stop_mask, n, stop_steps));
        if (word_logps.empty()) {
            out.word_ce = ad::mul_const(out.stop_ce, 0.0);
        } else {
            const int w = (int)word_logps.size();
            out.word_ce = ad::masked_nll(
                ad::reshape(ad::stack_steps(word_logps), {n * w, cfg.vocab_size}),
                reorder_steps(word_targets, n, w), reorder_steps(word_mask, n, w));
        }
        out.total = ad::add(out.word_ce, out.stop_ce);
        return out;
    }

    // Greedy or sampled decoding; pass a generator to sample, null for argmax.
    std::vector<data::Report> decode(const Tensor& v, Rng* sampler = nullptr) {
        ad::NoGradGuard ng;
        const int n = v.dim(0);
        auto sent_state = sent_cell_.zero_state(n);
        std::vector<data::Report> out((size_t)n);
        std::vector<char> alive((size_t)n, 1);

        for (int s = 0; s < cfg.t_max; ++s) {
            sent_state = sent_cell_.fwd(ad::leaf(v), sent_state);
            Tensor u = ad::softmax_rows(stop_head_.fwd(sent_state.h)).val();
            for (int i = 0; i < n; ++i)
                if (alive[(size_t)i] && u.at({i, 1}) > cfg.stop_threshold) alive[(size_t)i] = 0;
            if (std::none_of(alive.begin(), alive.end(), [](char a) { return a != 0; })) break;

            ad::Var topic = topic_of(sent_state.h);
            auto states = word_zero_states(n);
            word_stack_step(states, topic);
            std::vector<int> prev((size_t)n, data::START);
            std::vector<std::vector<int>> sent((size_t)n);
            std::vector<char> in_sent = alive;
            for (int k = 0; k < cfg.l_max; ++k) {
                ad::Var h = word_stack_step(states, word_emb_.fwd_ids(prev));
                Tensor p = ad::softmax_rows(out_head_.fwd(h)).val();
                for (int i = 0; i < n; ++i) {
                    if (!in_sent[(size_t)i]) {
                        prev[(size_t)i] = data::PAD;
                        continue;
                    }
                    const int id = sampler ? sample_row(p, i, *sampler) : argmax_row(p, i);
                    prev[(size_t)i] = id;
                    if (id == data::STOPS || k == cfg.l_max - 1)
                        in_sent[(size_t)i] = 0;
                    else
                        sent[(size_t)i].push_back(id);
                }
                if (std::none_of(in_sent.begin(), in_sent.end(), [](char a) { return a != 0; }))
                    break;
            }
            for (int i = 0; i < n; ++i)
                if (alive[(size_t)i] && !sent[(size_t)i].empty())
                    out[(size_t)i].push_back(std::move(sent[(size_t)i]));
        }
        for (auto& r : out)
            if (r.empty()) r.push_back({data::STOPS}); // empty-report marker
        return out;
    }

    // Soft relaxation: emits the fixed [N, flat_cap, vocab] layout. Content is
    // differentiable (expected-embedding feedback at unit temperature); stop
    // and terminator decisions are hard, taken on current values.
    SoftDecode decode_soft(const ad::Var& v) {
        const int n = v.val().dim(0);
        const int vs = cfg.vocab_size;
        Tensor pad_row({n, vs});
        for (int i = 0; i < n; ++i) pad_row.at({i, data::PAD}) = 1.0;

        auto sent_state = sent_cell_.zero_state(n);
        std::vector<ad::Var> cols;
        cols.reserve((size_t)cfg.flat_cap());
        std::vector<char> alive((size_t)n, 1);
        SoftDecode res;
        res.reports.resize((size_t)n);

        for (int s = 0; s < cfg.t_max; ++s) {
            sent_state = sent_cell_.fwd(v, sent_state);
            Tensor u = eval_softmax(stop_head_.fwd(sent_state.h));
            for (int i = 0; i < n; ++i)
                if (alive[(size_t)i] && u.at({i, 1}) > cfg.stop_threshold) alive[(size_t)i] = 0;

            ad::Var topic = topic_of(sent_state.h);
            auto states = word_zero_states(n);
            word_stack_step(states, topic);
            ad::Var feedback = word_emb_.fwd_ids(std::vector<int>((size_t)n, data::START));
            std::vector<char> in_sent = alive;
            std::vector<std::vector<int>> sent((size_t)n);

            for (int k = 0; k < cfg.l_max; ++k) {
                ad::Var h = word_stack_step(states, feedback);
                ad::Var d = ad::softmax_rows(out_head_.fwd(h));
                // freeze finished rows to the padding token
                Tensor live({n, vs}), dead({n, vs});
                for (int i = 0; i < n; ++i) {
                    if (in_sent[(size_t)i])
                        for (int j = 0; j < vs; ++j) live.at({i, j}) = 1.0;
                    else
                        dead.at({i, data::PAD}) = 1.0;
                }
                ad::Var masked = ad::add(ad::mul(d, ad::leaf(live)), ad::leaf(dead));
                cols.push_back(masked);
                feedback = word_emb_.fwd_probs(masked);

                const std::vector<int> ids = ad::argmax_rows(d.val());
                for (int i = 0; i < n; ++i) {
                    if (!in_sent[(size_t)i]) continue;
                    if (ids[(size_t)i] == data::STOPS || k == cfg.l_max - 1)
                        in_sent[(size_t)i] = 0;
                    else
                        sent[(size_t)i].push_back(ids[(size_t)i]);
                }
            }
            for (int i = 0; i < n; ++i)
                if (alive[(size_t)i] && !sent[(size_t)i].empty())
                    res.reports[(size_t)i].push_back(std::move(sent[(size_t)i]));
        }
        for (auto& r : res.reports)
            if (r.empty()) r.push_back({data::STOPS});
        res.probs = ad::stack_steps(cols); // [N, flat_cap, vocab]
        return res;
    }

    std::vector<nn::Parameter*> params() {
        std::vector<nn::Parameter*> ps;
        sent_cell_.collect(ps);
        stop_head_.collect(ps);
        topic_l1_.collect(ps);
        topic_l2_.collect(ps);
        topic_out_.collect(ps);
        word_emb_.collect(ps);
        for (auto& c : word_cells_) c.collect(ps);
        out_head_.collect(ps);
        return ps;
    }

    // --- decomposed steps (decode/teacher-forcing are built from these) ---

    nn::LSTMCell::State sent_zero_state(int n) const { return sent_cell_.zero_state(n); }

    nn::LSTMCell::State sentence_step(const ad::Var& v, const nn::LSTMCell::State& st) {
        return sent_cell_.fwd(v, st);
    }

    ad::Var stop_logits(const ad::Var& h) { return stop_head_.fwd(h); }

    // three-layer topic map: two hidden ReLU layers, then an affine output
    ad::Var topic_of(const ad::Var& h) {
        return topic_out_.fwd(ad::relu(topic_l2_.fwd(ad::relu(topic_l1_.fwd(h)))));
    }

    std::vector<nn::LSTMCell::State> word_zero_states(int n) const {
        std::vector<nn::LSTMCell::State> st;
        st.reserve(word_cells_.size());
        for (const auto& c : word_cells_) st.push_back(c.zero_state(n));
        return st;
    }

    // one step through the stacked word LSTM; returns the top hidden state
    ad::Var word_stack_step(std::vector<nn::LSTMCell::State>& st, const ad::Var& x) {
        ad::Var h = x;
        for (size_t l = 0; l < word_cells_.size(); ++l) {
            st[l] = word_cells_[l].fwd(h, st[l]);
            h = st[l].h;
        }
        return h;
    }

    ad::Var word_logits(const ad::Var& h) { return out_head_.fwd(h); }

    nn::Embedding& word_embedding() { return word_emb_; }

  private:
    static Tensor eval_softmax(const ad::Var& logits) {
        ad::NoGradGuard ng;
        return ad::softmax_rows(ad::leaf(logits.val())).val();
    }

    // stack_steps orders [n][step]; per-step target/mask lists are [step][n]
    template <class T>
    static std::vector<T> reorder_steps(const std::vector<T>& step_major, int n, int steps) {
        std::vector<T> out(step_major.size());
        for (int s = 0; s < steps; ++s)
            for (int i = 0; i < n; ++i) out[(size_t)(i * steps + s)] = step_major[(size_t)(s * n + i)];
        return out;
    }

    static int argmax_row(const Tensor& p, int row) {
        int best = 0;
        for (int j = 1; j < p.dim(1); ++j)
            if (p.at({row, j}) > p.at({row, best})) best = j;
        return best;
    }

    static int sample_row(const Tensor& p, int row, Rng& rng) {
        double r = rng.uniform(), acc = 0.0;
        for (int j = 0; j < p.dim(1); ++j) {
            acc += p.at({row, j});
            if (r < acc) return j;
        }
        return p.dim(1) - 1;
    }

    nn::LSTMCell sent_cell_;
    nn::Linear stop_head_, topic_l1_, topic_l2_, topic_out_, out_head_;
    nn::Embedding word_emb_;
    std::vector<nn::LSTMCell> word_cells_;
};

} // namespace radsynth
