#pragma once

#include <algorithm>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "dapose/augmentation.hpp"
#include "dapose/common.hpp"
#include "dapose/datasets.hpp"

namespace dapose::cfg {

/// Style-transfer settings: η of the feature interpolation, the style-net
/// pretraining budget, and whether stylized source images are precomputed
/// once per epoch or drawn per batch.
struct StyleConfig {
    bool enabled = true; // off: source images pass through unstylized
    double eta = 0.5;
    int64_t pretrain_steps = 600;
    int64_t batch = 8;
    double lr = 1e-3;
    bool precompute_per_epoch = false;
};

struct LossConfig {
    double alpha = 1.0;
    double beta = 0.1;
    double gamma = 0.3;
    double tau_p = 0.5;
    bool div_per_sample = false;
    std::string lambda_mode = "warmup"; // "warmup" | "constant"
    double lambda_value = 1.0;          // used when lambda_mode == "constant"
};

struct AugConfig {
    PolicyRanges normal = policy_ranges(AugPolicy::normal);
    PolicyRanges strong = policy_ranges(AugPolicy::strong);
    PolicyRanges weak = policy_ranges(AugPolicy::weak);
    double tau_lo = 0.5;
    double tau_hi = 1.0;
};

struct TrainerConfig {
    int64_t total_iterations = 3000;
    double base_lr = 1e-4;
    std::vector<double> milestone_fractions{0.75, 1.0};
    std::vector<double> milestone_lrs{1e-5, 1e-6};
    double ema_mu = 0.999;
    int64_t batch_source = 16;
    int64_t batch_target = 16;
    int64_t pretrain_steps = 2000;
    double pretrain_lr = 1e-3;
    int64_t eval_every = 250;
    int64_t checkpoint_every = 1000;
};

/// The single declarative document controlling a run. Everything a command
/// needs is derived from this plus the CLI flags that override it.
struct RunConfig {
    uint64_t seed = 1;
    std::string out_dir = "runs/run";
    std::string data_dir = "data/toy";
    ToyDomainConfig dataset;
    AugConfig augmentation;
    StyleConfig style;
    LossConfig loss;
    TrainerConfig trainer;
    std::vector<uint64_t> ablate_seeds{1, 2, 3};

    void validate() const {
        check_config(!out_dir.empty(), "out_dir must not be empty");
        check_config(!data_dir.empty(), "data_dir must not be empty");
        ToyDomainConfig d = dataset;
        d.seed = seed;
        d.validate();
        check_config(dataset.image_size % 16 == 0,
                     detail::cat("image_size ", dataset.image_size,
                                 " is invalid: the pose network downsamples by 16 and emits "
                                 "stride-4 heatmaps, so image_size must be a positive "
                                 "multiple of 16"));
        check_config(style.eta >= 0.0 && style.eta <= 1.0, "style.eta must be in [0, 1]");
        check_config(style.pretrain_steps > 0, "style.pretrain_steps must be positive");
        check_config(style.batch > 0, "style.batch must be positive");
        check_config(style.lr > 0, "style.lr must be positive");
        check_config(loss.alpha >= 0 && loss.beta >= 0 && loss.gamma >= 0,
                     "loss weights must be nonnegative");
        check_config(loss.tau_p > 0.0 && loss.tau_p < 1.0, "loss.tau_p must be in (0, 1)");
        check_config(loss.lambda_mode == "warmup" || loss.lambda_mode == "constant",
                     "loss.lambda_mode must be 'warmup' or 'constant'");
        check_config(loss.lambda_value >= 0, "loss.lambda_value must be nonnegative");
        check_config(augmentation.tau_lo >= 0 && augmentation.tau_lo < augmentation.tau_hi &&
                         augmentation.tau_hi <= 1.0,
                     "augmentation tau range must satisfy 0 <= tau_lo < tau_hi <= 1");
        for (const auto* pr : {&augmentation.normal, &augmentation.strong, &augmentation.weak}) {
            check_config(pr->rot_deg >= 0 && pr->rot_deg < 90,
                         "augmentation rot_deg must be in [0, 90)");
            check_config(pr->scale_lo > 0 && pr->scale_hi >= pr->scale_lo,
                         "augmentation scale range must satisfy 0 < lo <= hi");
            check_config(pr->brightness >= 0 && pr->jitter >= 0,
                         "augmentation brightness/jitter must be nonnegative");
            check_config(pr->contrast_lo > 0 && pr->contrast_hi >= pr->contrast_lo,
                         "augmentation contrast range must satisfy 0 < lo <= hi");
        }
        check_config(trainer.total_iterations > 0, "trainer.total_iterations must be positive");
        check_config(trainer.base_lr > 0, "trainer.base_lr must be positive");
        check_config(trainer.ema_mu >= 0.0 && trainer.ema_mu <= 1.0,
                     "trainer.ema_mu must be in [0, 1]");
        check_config(trainer.batch_source > 0 && trainer.batch_target > 0,
                     "trainer batch sizes must be positive");
        check_config(trainer.pretrain_steps > 0, "trainer.pretrain_steps must be positive");
        check_config(trainer.pretrain_lr > 0, "trainer.pretrain_lr must be positive");
        check_config(trainer.eval_every > 0, "trainer.eval_every must be positive");
        check_config(trainer.checkpoint_every > 0, "trainer.checkpoint_every must be positive");
        check_config(trainer.milestone_fractions.size() == trainer.milestone_lrs.size(),
                     "trainer.milestone_fractions and milestone_lrs must have equal length");
        double prev_frac = 0.0;
        double prev_lr = trainer.base_lr;
        for (size_t i = 0; i < trainer.milestone_fractions.size(); ++i) {
            const double fr = trainer.milestone_fractions[i];
            const double lr = trainer.milestone_lrs[i];
            check_config(fr > prev_frac && fr <= 1.0,
                         "trainer.milestone_fractions must be strictly increasing in (0, 1]");
            check_config(lr > 0.0 && lr < prev_lr,
                         "trainer.milestone_lrs must strictly decrease from base_lr");
            prev_frac = fr;
            prev_lr = lr;
        }
        check_config(!ablate_seeds.empty(), "ablate_seeds must not be empty");
    }
};

inline nlohmann::json to_json(const PolicyRanges& p) {
    return nlohmann::json{{"rot_deg", p.rot_deg},         {"scale_lo", p.scale_lo},
                          {"scale_hi", p.scale_hi},       {"brightness", p.brightness},
                          {"contrast_lo", p.contrast_lo}, {"contrast_hi", p.contrast_hi},
                          {"jitter", p.jitter}};
}

inline nlohmann::json to_json(const RunConfig& c) {
    return nlohmann::json{
        {"seed", c.seed},
        {"out_dir", c.out_dir},
        {"data_dir", c.data_dir},
        {"dataset",
         {{"n_source", c.dataset.n_source},
          {"n_target_train", c.dataset.n_target_train},
          {"n_target_eval", c.dataset.n_target_eval},
          {"image_size", c.dataset.image_size},
          {"k", c.dataset.k},
          {"shift", dapose::to_json(c.dataset.shift)}}},
        {"augmentation",
         {{"normal", to_json(c.augmentation.normal)},
          {"strong", to_json(c.augmentation.strong)},
          {"weak", to_json(c.augmentation.weak)},
          {"tau_lo", c.augmentation.tau_lo},
          {"tau_hi", c.augmentation.tau_hi}}},
        {"style",
         {{"enabled", c.style.enabled},
          {"eta", c.style.eta},
          {"pretrain_steps", c.style.pretrain_steps},
          {"batch", c.style.batch},
          {"lr", c.style.lr},
          {"precompute_per_epoch", c.style.precompute_per_epoch}}},
        {"loss",
         {{"alpha", c.loss.alpha},
          {"beta", c.loss.beta},
          {"gamma", c.loss.gamma},
          {"tau_p", c.loss.tau_p},
          {"div_per_sample", c.loss.div_per_sample},
          {"lambda_mode", c.loss.lambda_mode},
          {"lambda_value", c.loss.lambda_value}}},
        {"trainer",
         {{"total_iterations", c.trainer.total_iterations},
          {"base_lr", c.trainer.base_lr},
          {"milestone_fractions", c.trainer.milestone_fractions},
          {"milestone_lrs", c.trainer.milestone_lrs},
          {"ema_mu", c.trainer.ema_mu},
          {"batch_source", c.trainer.batch_source},
          {"batch_target", c.trainer.batch_target},
          {"pretrain_steps", c.trainer.pretrain_steps},
          {"pretrain_lr", c.trainer.pretrain_lr},
          {"eval_every", c.trainer.eval_every},
          {"checkpoint_every", c.trainer.checkpoint_every}}},
        {"ablate_seeds", c.ablate_seeds}};
}

namespace detail {

using dapose::detail::cat;

/// Strict object reader: every key must be consumed, anything left over is an
/// unknown key and rejects the whole config.
class ObjReader {
  public:
    ObjReader(const nlohmann::json& j, std::string path) : j_(j), path_(std::move(path)) {
        check_config(j_.is_object(), cat(path_, ": expected a JSON object"));
    }

    template <typename T>
    void read(const char* key, T& out) {
        if (!j_.contains(key)) return;
        seen_.push_back(key);
        try {
            out = j_.at(key).get<T>();
        } catch (const nlohmann::json::exception&) {
            throw ConfigError(cat(path_, ".", key, ": wrong JSON type"));
        }
    }

    const nlohmann::json* child(const char* key) {
        if (!j_.contains(key)) return nullptr;
        seen_.push_back(key);
        return &j_.at(key);
    }

    void finish() const {
        for (auto it = j_.begin(); it != j_.end(); ++it) {
            if (std::find(seen_.begin(), seen_.end(), it.key()) == seen_.end())
                throw ConfigError(cat("unknown config key '", path_, ".", it.key(), "'"));
        }
    }

    const std::string& path() const { return path_; }

  private:
    const nlohmann::json& j_;
    std::string path_;
    std::vector<std::string> seen_;
};

inline PolicyRanges ranges_from_json(const nlohmann::json& j, const std::string& path,
                                          PolicyRanges base) {
    ObjReader r(j, path);
    r.read("rot_deg", base.rot_deg);
    r.read("scale_lo", base.scale_lo);
    r.read("scale_hi", base.scale_hi);
    r.read("brightness", base.brightness);
    r.read("contrast_lo", base.contrast_lo);
    r.read("contrast_hi", base.contrast_hi);
    r.read("jitter", base.jitter);
    r.finish();
    return base;
}

} // namespace detail

/// Parses a config document over the defaults. Unknown keys anywhere reject
/// the document; types are checked; the result is validated.
inline RunConfig config_from_json(const nlohmann::json& root) {
    RunConfig c;
    detail::ObjReader r(root, "config");
    r.read("seed", c.seed);
    r.read("out_dir", c.out_dir);
    r.read("data_dir", c.data_dir);
    if (const auto* d = r.child("dataset")) {
        detail::ObjReader rd(*d, "config.dataset");
        rd.read("n_source", c.dataset.n_source);
        rd.read("n_target_train", c.dataset.n_target_train);
        rd.read("n_target_eval", c.dataset.n_target_eval);
        rd.read("image_size", c.dataset.image_size);
        rd.read("k", c.dataset.k);
        if (const auto* s = rd.child("shift")) {
            detail::ObjReader rs(*s, "config.dataset.shift");
            rs.read("palette_swap", c.dataset.shift.palette_swap);
            rs.read("background", c.dataset.shift.background);
            rs.read("blur_radius", c.dataset.shift.blur_radius);
            rs.read("contrast_lo", c.dataset.shift.contrast_lo);
            rs.read("contrast_hi", c.dataset.shift.contrast_hi);
            rs.finish();
        }
        rd.finish();
    }
    if (const auto* a = r.child("augmentation")) {
        detail::ObjReader ra(*a, "config.augmentation");
        if (const auto* p = ra.child("normal"))
            c.augmentation.normal =
                detail::ranges_from_json(*p, "config.augmentation.normal", c.augmentation.normal);
        if (const auto* p = ra.child("strong"))
            c.augmentation.strong =
                detail::ranges_from_json(*p, "config.augmentation.strong", c.augmentation.strong);
        if (const auto* p = ra.child("weak"))
            c.augmentation.weak =
                detail::ranges_from_json(*p, "config.augmentation.weak", c.augmentation.weak);
        ra.read("tau_lo", c.augmentation.tau_lo);
        ra.read("tau_hi", c.augmentation.tau_hi);
        ra.finish();
    }
    if (const auto* s = r.child("style")) {
        detail::ObjReader rs(*s, "config.style");
        rs.read("enabled", c.style.enabled);
        rs.read("eta", c.style.eta);
        rs.read("pretrain_steps", c.style.pretrain_steps);
        rs.read("batch", c.style.batch);
        rs.read("lr", c.style.lr);
        rs.read("precompute_per_epoch", c.style.precompute_per_epoch);
        rs.finish();
    }
    if (const auto* l = r.child("loss")) {
        detail::ObjReader rl(*l, "config.loss");
        rl.read("alpha", c.loss.alpha);
        rl.read("beta", c.loss.beta);
        rl.read("gamma", c.loss.gamma);
        rl.read("tau_p", c.loss.tau_p);
        rl.read("div_per_sample", c.loss.div_per_sample);
        rl.read("lambda_mode", c.loss.lambda_mode);
        rl.read("lambda_value", c.loss.lambda_value);
        rl.finish();
    }
    if (const auto* t = r.child("trainer")) {
        detail::ObjReader rt(*t, "config.trainer");
        rt.read("total_iterations", c.trainer.total_iterations);
        rt.read("base_lr", c.trainer.base_lr);
        rt.read("milestone_fractions", c.trainer.milestone_fractions);
        rt.read("milestone_lrs", c.trainer.milestone_lrs);
        rt.read("ema_mu", c.trainer.ema_mu);
        rt.read("batch_source", c.trainer.batch_source);
        rt.read("batch_target", c.trainer.batch_target);
        rt.read("pretrain_steps", c.trainer.pretrain_steps);
        rt.read("pretrain_lr", c.trainer.pretrain_lr);
        rt.read("eval_every", c.trainer.eval_every);
        rt.read("checkpoint_every", c.trainer.checkpoint_every);
        rt.finish();
    }
    r.read("ablate_seeds", c.ablate_seeds);
    r.finish();
    c.validate();
    return c;
}

inline RunConfig load_config(const std::filesystem::path& path) {
    std::ifstream is(path);
    check_config(is.good(), detail::cat("cannot open config file '", path.string(), "'"));
    nlohmann::json j = nlohmann::json::parse(is, nullptr, false);
    check_config(!j.is_discarded(),
                 detail::cat("config file '", path.string(), "' is not valid JSON"));
    return config_from_json(j);
}

/// FNV-1a (64-bit) over the canonical serialization. The hash identifies the
/// effective configuration in every output artifact.
inline std::string config_hash(const RunConfig& c) {
    const std::string s = to_json(c).dump();
    uint64_t h = 0xcbf29ce484222325ull;
    for (unsigned char ch : s) {
        h ^= ch;
        h *= 0x100000001b3ull;
    }
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
    return std::string(buf);
}

/// Writes `<dir>/config.resolved.json`: the full effective config plus its
/// hash (the hash covers everything except the hash field itself).
inline std::string write_resolved(const RunConfig& c, const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    nlohmann::json j = to_json(c);
    const std::string hash = config_hash(c);
    j["config_hash"] = hash;
    std::ofstream os(dir / "config.resolved.json");
    check_data(os.good(), detail::cat("cannot write config.resolved.json under '", dir.string(),
                                      "'"));
    os << j.dump(2) << "\n";
    return hash;
}

} // namespace dapose::cfg
