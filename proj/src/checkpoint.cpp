#include <fstream>

#include "dualfuse/trainloop.hpp"

namespace dualfuse {

using json = nlohmann::json;

namespace {

json counters_to_json(const TrainCounters& c) {
    return {
        {"fusion_loss_evaluations", c.fusion_loss_evaluations},
        {"detection_loss_evaluations", c.detection_loss_evaluations},
        {"detection_updates_to_generator", c.detection_updates_to_generator},
        {"generator_updates", c.generator_updates},
        {"critic_updates", c.critic_updates},
        {"detector_updates", c.detector_updates},
    };
}

TrainCounters counters_from_json(const json& j) {
    TrainCounters c;
    c.fusion_loss_evaluations = j.at("fusion_loss_evaluations").get<int64_t>();
    c.detection_loss_evaluations = j.at("detection_loss_evaluations").get<int64_t>();
    c.detection_updates_to_generator = j.at("detection_updates_to_generator").get<int64_t>();
    c.generator_updates = j.at("generator_updates").get<int64_t>();
    c.critic_updates = j.at("critic_updates").get<int64_t>();
    c.detector_updates = j.at("detector_updates").get<int64_t>();
    return c;
}

template <class Saveable>
void write_sub(torch::serialize::OutputArchive& archive, const std::string& key, Saveable& item) {
    torch::serialize::OutputArchive sub;
    item.save(sub);
    archive.write(key, sub);
}

template <class Loadable>
void read_sub(torch::serialize::InputArchive& archive, const std::string& key, Loadable& item) {
    torch::serialize::InputArchive sub;
    if (!archive.try_read(key, sub)) throw FormatError("checkpoint is missing '" + key + "'");
    item.load(sub);
}

}  // namespace

std::filesystem::path checkpoint_sidecar(const std::filesystem::path& path) {
    auto sidecar = path;
    sidecar += ".json";
    return sidecar;
}

void save_checkpoint(TrainState& state, const std::filesystem::path& path) {
    torch::serialize::OutputArchive archive;
    write_sub(archive, "generator", *state.generator);
    write_sub(archive, "critic_target", *state.critic_target);
    write_sub(archive, "critic_detail", *state.critic_detail);
    write_sub(archive, "detector", *state.detector);
    write_sub(archive, "opt_generator", *state.opt_generator);
    write_sub(archive, "opt_critic_target", *state.opt_critic_target);
    write_sub(archive, "opt_critic_detail", *state.opt_critic_detail);
    write_sub(archive, "opt_detector", *state.opt_detector);
    archive.write("rng_state", state.rng.get_state());
    archive.write("epoch_order", torch::tensor(state.epoch_order, torch::kLong));
    try {
        archive.save_to(path.string());
    } catch (const c10::Error& e) {
        throw IoError("cannot write checkpoint '" + path.string() + "': " + e.what_without_backtrace());
    }

    json sidecar = {
        {"step", state.step},
        {"epoch", state.epoch},
        {"cursor", state.cursor},
        {"seed", state.config.seed},
        {"num_classes", state.config.num_classes},
        {"config_hash", state.config.hash()},
        {"config", state.config.to_json()},
        {"counters", counters_to_json(state.counters)},
    };
    std::ofstream out(checkpoint_sidecar(path));
    if (!out) throw IoError("cannot write checkpoint sidecar for '" + path.string() + "'");
    out << sidecar.dump(2) << '\n';
}

TrainState load_checkpoint(const std::filesystem::path& path, const std::optional<TrainConfig>& expected,
                           std::vector<std::string>* warnings) {
    const auto sidecar_path = checkpoint_sidecar(path);
    std::ifstream in(sidecar_path);
    if (!in) throw IoError("checkpoint sidecar not found: " + sidecar_path.string());
    json sidecar;
    try {
        sidecar = json::parse(in);
    } catch (const json::exception& e) {
        throw FormatError("malformed checkpoint sidecar '" + sidecar_path.string() + "': " + e.what());
    }

    TrainConfig config;
    int64_t step = 0;
    int64_t epoch = 0;
    int64_t cursor = 0;
    TrainCounters counters;
    try {
        config = TrainConfig::from_json(sidecar.at("config"));
        step = sidecar.at("step").get<int64_t>();
        epoch = sidecar.at("epoch").get<int64_t>();
        cursor = sidecar.at("cursor").get<int64_t>();
        counters = counters_from_json(sidecar.at("counters"));
    } catch (const json::exception& e) {
        throw FormatError("malformed checkpoint sidecar '" + sidecar_path.string() + "': " + e.what());
    }

    if (expected) {
        if (expected->num_classes != config.num_classes) {
            throw FormatError("checkpoint has " + std::to_string(config.num_classes) + " detector classes, expected " +
                              std::to_string(expected->num_classes));
        }
        if (expected->hash() != config.hash() && warnings) {
            warnings->push_back("checkpoint config hash " + std::to_string(config.hash()) +
                                " differs from the current config hash " + std::to_string(expected->hash()));
        }
    }

    TrainState state(config);
    try {
        torch::serialize::InputArchive archive;
        archive.load_from(path.string());
        read_sub(archive, "generator", *state.generator);
        read_sub(archive, "critic_target", *state.critic_target);
        read_sub(archive, "critic_detail", *state.critic_detail);
        read_sub(archive, "detector", *state.detector);
        read_sub(archive, "opt_generator", *state.opt_generator);
        read_sub(archive, "opt_critic_target", *state.opt_critic_target);
        read_sub(archive, "opt_critic_detail", *state.opt_critic_detail);
        read_sub(archive, "opt_detector", *state.opt_detector);
        torch::Tensor rng_state;
        torch::Tensor order;
        archive.read("rng_state", rng_state);
        archive.read("epoch_order", order);
        state.rng.set_state(rng_state);
        order = order.to(torch::kLong).contiguous();
        state.epoch_order.assign(order.data_ptr<int64_t>(), order.data_ptr<int64_t>() + order.numel());
    } catch (const c10::Error& e) {
        throw FormatError("cannot read checkpoint '" + path.string() + "': " + e.what_without_backtrace());
    }
    state.step = step;
    state.epoch = epoch;
    state.cursor = cursor;
    state.counters = counters;
    state.set_learning_rate(learning_rate_at(config, epoch));
    return state;
}

}  // namespace dualfuse
