#pragma once

// Small convolutional classifier used throughout: feature extractor for the
// distribution metric, image encoder for the report decoder, conditioning
// evaluator, and the downstream-experiment classifier.

#include <string>
#include <vector>

#include "radsynth/autodiff.hpp"
#include "radsynth/checkpoint.hpp"
#include "radsynth/data.hpp"
#include "radsynth/nn.hpp"

namespace radsynth {

struct ClassifierConfig {
    int image_size = 32;
    int in_channels = 3;
    int base_channels = 16;
    int feat_dim = 128;
    int class_count = 4;
};

// conv/pool ×3 backbone, then fc -> ReLU features -> linear logits.
class ToyClassifier {
  public:
    ClassifierConfig cfg;
    bool trained = false; // set by training; gates use as a feature extractor

    void init(const ClassifierConfig& c, Rng& rng) {
        cfg = c;
        c1.init("clf.c1", c.in_channels, c.base_channels, 3, 1, rng);
        c2.init("clf.c2", c.base_channels, 2 * c.base_channels, 3, 1, rng);
        c3.init("clf.c3", 2 * c.base_channels, 4 * c.base_channels, 3, 1, rng);
        const int side = c.image_size / 8;
        flat_dim_ = 4 * c.base_channels * side * side;
        fc1.init("clf.fc1", flat_dim_, c.feat_dim, rng);
        fc2.init("clf.fc2", c.feat_dim, c.class_count, rng);
    }

    // x: [N,C,S,S] -> [N,feat_dim]; the penultimate activation.
    ad::Var features(const ad::Var& x) {
        ad::Var h = ad::avg_pool2(ad::relu(c1.fwd(x)));
        h = ad::avg_pool2(ad::relu(c2.fwd(h)));
        h = ad::avg_pool2(ad::relu(c3.fwd(h)));
        h = ad::reshape(h, {x.val().dim(0), flat_dim_});
        return ad::relu(fc1.fwd(h));
    }

    ad::Var logits(const ad::Var& x) { return fc2.fwd(features(x)); }

    std::vector<nn::Parameter*> params() {
        std::vector<nn::Parameter*> ps;
        c1.collect(ps);
        c2.collect(ps);
        c3.collect(ps);
        fc1.collect(ps);
        fc2.collect(ps);
        return ps;
    }

    void save(const std::string& path) const {
        Archive a;
        a.meta["kind"] = "toy_classifier";
        a.meta["trained"] = trained;
        a.meta["config"] = {{"image_size", cfg.image_size},   {"in_channels", cfg.in_channels},
                            {"base_channels", cfg.base_channels}, {"feat_dim", cfg.feat_dim},
                            {"class_count", cfg.class_count}};
        archive_params(a, const_cast<ToyClassifier*>(this)->params());
        a.save(path);
    }

    static ToyClassifier load(const std::string& path) {
        Archive a = Archive::load(path);
        if (a.meta.value("kind", "") != "toy_classifier")
            throw IoError("not a classifier checkpoint: " + path);
        ClassifierConfig c;
        const auto& j = a.meta.at("config");
        c.image_size = j.at("image_size").get<int>();
        c.in_channels = j.at("in_channels").get<int>();
        c.base_channels = j.at("base_channels").get<int>();
        c.feat_dim = j.at("feat_dim").get<int>();
        c.class_count = j.at("class_count").get<int>();
        ToyClassifier clf;
        Rng rng(0);
        clf.init(c, rng);
        clf.trained = a.meta.value("trained", false);
        restore_params(a, clf.params());
        return clf;
    }

  private:
    nn::Conv2d c1, c2, c3;
    nn::Linear fc1, fc2;
    int flat_dim_ = 0;
};

// Supervised training on image tensors already stacked as [N,C,S,S].
inline ToyClassifier train_classifier(const Tensor& images, const std::vector<int>& labels,
                                      const ClassifierConfig& cfg, std::uint64_t seed, int steps,
                                      int batch_size = 32, double lr = 1e-3) {
    Rng rng(seed);
    ToyClassifier clf;
    clf.init(cfg, rng);
    auto ps = clf.params();
    nn::Adam opt;
    opt.lr = lr;
    opt.beta1 = 0.9;
    opt.init(ps);
    const int n = images.dim(0);
    std::vector<double> ones((size_t)batch_size, 1.0);
    for (int step = 0; step < steps; ++step) {
        std::vector<int> idx((size_t)batch_size);
        for (auto& i : idx) i = (int)rng.uniform_u64((std::uint64_t)n);
        Tensor xb({batch_size, cfg.in_channels, cfg.image_size, cfg.image_size});
        std::vector<int> yb((size_t)batch_size);
        const long long plane = (long long)cfg.in_channels * cfg.image_size * cfg.image_size;
        for (int i = 0; i < batch_size; ++i) {
            std::memcpy(xb.data() + i * plane, images.data() + (long long)idx[(size_t)i] * plane,
                        sizeof(double) * (size_t)plane);
            yb[(size_t)i] = labels[(size_t)idx[(size_t)i]];
        }
        opt.zero_grad(ps);
        ad::Var loss = ad::masked_nll(ad::log_softmax_rows(clf.logits(ad::leaf(xb))), yb, ones);
        ad::backward(loss);
        opt.step(ps);
    }
    clf.trained = true;
    return clf;
}

// Stack every sample of a dataset into one image tensor (+ labels).
inline std::pair<Tensor, std::vector<int>> stack_images(const data::Dataset& ds,
                                                        const std::vector<int>& idx) {
    data::Batch b = ds.load_batch(idx);
    return {b.images, b.label_ids};
}

} // namespace radsynth
