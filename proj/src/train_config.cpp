#include "dualfuse/train_config.hpp"

#include <cmath>

namespace dualfuse {

using json = nlohmann::json;

std::string_view to_string(Strategy s) {
    switch (s) {
        case Strategy::dt: return "dt";
        case Strategy::tt: return "tt";
        case Strategy::ct: return "ct";
    }
    return "ct";
}

Strategy parse_strategy(std::string_view text) {
    if (text == "dt") return Strategy::dt;
    if (text == "tt") return Strategy::tt;
    if (text == "ct") return Strategy::ct;
    throw ValueError("unknown strategy '" + std::string(text) + "' (expected dt, tt or ct)");
}

namespace {

std::string dtype_name(torch::Dtype d) {
    if (d == torch::kFloat) return "float32";
    if (d == torch::kDouble) return "float64";
    throw ValueError("unsupported training dtype");
}

torch::Dtype parse_dtype(const std::string& name) {
    if (name == "float32") return torch::kFloat;
    if (name == "float64") return torch::kDouble;
    throw ValueError("unsupported training dtype '" + name + "'");
}

void require(bool ok, const std::string& what) {
    if (!ok) throw ValueError("invalid train config: " + what);
}

}  // namespace

void TrainConfig::validate() const {
    require(lr > 0.0 && std::isfinite(lr), "lr must be positive");
    require(lr_decay > 0.0 && lr_decay <= 1.0, "lr_decay must lie in (0, 1]");
    require(weights.alpha >= 0.0 && weights.beta >= 0.0 && weights.lambda >= 0.0, "loss weights must be non-negative");
    require(weights.k > 0.0 && weights.p > 0.0, "penalty k and p must be positive");
    require(epochs > 0, "epochs must be positive");
    require(batch_size > 0, "batch_size must be positive");
    require(patch_size >= kDetectorStride && patch_size % kDetectorStride == 0, "patch_size must be a positive multiple of 16");
    require(critic_steps_per_gen > 0, "critic_steps_per_gen must be positive");
    require(max_steps >= 0, "max_steps must be non-negative");
    require(num_classes > 0, "num_classes must be positive");
    require(detector_epochs >= 0, "detector_epochs must be non-negative");
    require(adam_beta1 >= 0.0 && adam_beta1 < 1.0 && adam_beta2 >= 0.0 && adam_beta2 < 1.0, "adam betas in [0, 1)");
}

json TrainConfig::to_json() const {
    return {
        {"strategy", std::string(to_string(strategy))},
        {"alpha", weights.alpha},
        {"beta", weights.beta},
        {"lambda", weights.lambda},
        {"k", weights.k},
        {"p", weights.p},
        {"lr", lr},
        {"lr_decay", lr_decay},
        {"adam_beta1", adam_beta1},
        {"adam_beta2", adam_beta2},
        {"epochs", epochs},
        {"batch_size", batch_size},
        {"patch_size", patch_size},
        {"critic_steps_per_gen", critic_steps_per_gen},
        {"max_steps", max_steps},
        {"seed", seed},
        {"use_dt_critic", flags.use_dt_critic},
        {"use_dd_critic", flags.use_dd_critic},
        {"use_sdw", flags.use_sdw},
        {"use_mask", flags.use_mask},
        {"mask_source", std::string(to_string(mask_source))},
        {"num_classes", num_classes},
        {"train_detector", train_detector},
        {"detector_epochs", detector_epochs},
        {"generator",
         {{"dense_layers", generator.dense_layers},
          {"growth", generator.growth},
          {"merge_width", generator.merge_width},
          {"merge_mid", generator.merge_mid}}},
        {"decode", {{"conf_threshold", decode.conf_threshold}, {"nms_iou", decode.nms_iou}}},
        {"dtype", dtype_name(dtype)},
    };
}

TrainConfig TrainConfig::from_json(const json& j) {
    TrainConfig c;
    try {
        c.strategy = parse_strategy(j.at("strategy").get<std::string>());
        c.weights.alpha = j.at("alpha").get<double>();
        c.weights.beta = j.at("beta").get<double>();
        c.weights.lambda = j.at("lambda").get<double>();
        c.weights.k = j.at("k").get<double>();
        c.weights.p = j.at("p").get<double>();
        c.lr = j.at("lr").get<double>();
        c.lr_decay = j.at("lr_decay").get<double>();
        c.adam_beta1 = j.at("adam_beta1").get<double>();
        c.adam_beta2 = j.at("adam_beta2").get<double>();
        c.epochs = j.at("epochs").get<int64_t>();
        c.batch_size = j.at("batch_size").get<int64_t>();
        c.patch_size = j.at("patch_size").get<int64_t>();
        c.critic_steps_per_gen = j.at("critic_steps_per_gen").get<int64_t>();
        c.max_steps = j.at("max_steps").get<int64_t>();
        c.seed = j.at("seed").get<uint64_t>();
        c.flags.use_dt_critic = j.at("use_dt_critic").get<bool>();
        c.flags.use_dd_critic = j.at("use_dd_critic").get<bool>();
        c.flags.use_sdw = j.at("use_sdw").get<bool>();
        c.flags.use_mask = j.at("use_mask").get<bool>();
        c.mask_source = parse_mask_source(j.at("mask_source").get<std::string>());
        c.num_classes = j.at("num_classes").get<int64_t>();
        c.train_detector = j.at("train_detector").get<bool>();
        c.detector_epochs = j.at("detector_epochs").get<int64_t>();
        const auto& g = j.at("generator");
        c.generator.dense_layers = g.at("dense_layers").get<int64_t>();
        c.generator.growth = g.at("growth").get<int64_t>();
        c.generator.merge_width = g.at("merge_width").get<int64_t>();
        c.generator.merge_mid = g.at("merge_mid").get<int64_t>();
        const auto& d = j.at("decode");
        c.decode.conf_threshold = d.at("conf_threshold").get<double>();
        c.decode.nms_iou = d.at("nms_iou").get<double>();
        c.dtype = parse_dtype(j.at("dtype").get<std::string>());
    } catch (const json::exception& e) {
        throw FormatError(std::string("train config: ") + e.what());
    }
    c.validate();
    return c;
}

uint64_t TrainConfig::hash() const {
    uint64_t h = 1469598103934665603ULL;
    for (unsigned char ch : to_json().dump()) {
        h ^= ch;
        h *= 1099511628211ULL;
    }
    return h;
}

TrainConfig TrainConfig::full_scale() {
    TrainConfig c;
    c.patch_size = 320;
    c.batch_size = 64;
    c.epochs = 300;
    return c;
}

double learning_rate_at(const TrainConfig& config, int64_t epoch) {
    return config.lr * std::pow(config.lr_decay, static_cast<double>(epoch));
}

}  // namespace dualfuse
