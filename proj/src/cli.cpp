#include "dualfuse/cli.hpp"

#include <fstream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "dualfuse/evaluation.hpp"
#include "dualfuse/gradcheck.hpp"
#include "dualfuse/synth.hpp"
#include "dualfuse/trainloop.hpp"

namespace dualfuse {

namespace fs = std::filesystem;

namespace {

struct SynthArgs {
    SynthConfig config;
    std::string out_dir;
    std::string split = "train";
};

struct TrainArgs {
    TrainConfig config;
    std::string manifest;
    std::string out_dir;
    std::string strategy = "ct";
    std::string mask_source = "ground_truth";
    std::string dtype = "float32";
    std::string resume;
    bool no_dt_critic = false;
    bool no_dd_critic = false;
    bool no_sdw = false;
    bool no_mask = false;
};

struct FuseArgs {
    std::string checkpoint;
    std::string manifest;
    std::string infrared;
    std::string visible;
    std::string output;
};

struct EvalArgs {
    std::string manifest;
    std::string checkpoint;
    std::string oracle;
    std::string report;
    bool write_fused = false;
};

struct GradcheckArgs {
    GradcheckOptions options;
    std::string report;
};

void add_train_options(CLI::App& cmd, TrainArgs& a) {
    auto& c = a.config;
    cmd.add_option("--manifest", a.manifest, "Training manifest (manifest.jsonl)")->required()->check(CLI::ExistingFile);
    cmd.add_option("--out", a.out_dir, "Directory for checkpoints and the step log")->required();
    cmd.add_option("--strategy", a.strategy, "Training regime")->check(CLI::IsMember({"dt", "tt", "ct"}))->capture_default_str();
    cmd.add_option("--alpha", c.weights.alpha, "Pixel loss weight")->capture_default_str();
    cmd.add_option("--beta", c.weights.beta, "Adversarial loss weight")->capture_default_str();
    cmd.add_option("--lambda", c.weights.lambda, "Fusion weight in the joint objective")->capture_default_str();
    cmd.add_option("--k", c.weights.k, "Gradient penalty coefficient")->capture_default_str();
    cmd.add_option("--p", c.weights.p, "Gradient penalty exponent")->capture_default_str();
    cmd.add_option("--lr", c.lr, "Adam learning rate")->capture_default_str();
    cmd.add_option("--lr-decay", c.lr_decay, "Learning-rate decay per epoch")->capture_default_str();
    cmd.add_option("--adam-beta1", c.adam_beta1)->capture_default_str();
    cmd.add_option("--adam-beta2", c.adam_beta2)->capture_default_str();
    cmd.add_option("--epochs", c.epochs)->capture_default_str();
    cmd.add_option("--batch-size", c.batch_size)->capture_default_str();
    cmd.add_option("--patch-size", c.patch_size, "Crop size, a multiple of 16")->capture_default_str();
    cmd.add_option("--critic-steps", c.critic_steps_per_gen, "Critic updates per generator update")->capture_default_str();
    cmd.add_option("--max-steps", c.max_steps, "Stop after this many steps (0: all epochs)")->capture_default_str();
    cmd.add_option("--seed", c.seed)->capture_default_str();
    cmd.add_flag("--no-dt-critic", a.no_dt_critic, "Disable the target critic");
    cmd.add_flag("--no-dd-critic", a.no_dd_critic, "Disable the detail critic");
    cmd.add_flag("--no-sdw", a.no_sdw, "Plain L1 pixel loss instead of saliency weighting");
    cmd.add_flag("--no-mask", a.no_mask, "Critics see whole images instead of masked regions");
    cmd.add_option("--mask-source", a.mask_source)
        ->check(CLI::IsMember({"ground_truth", "threshold_saliency"}))
        ->capture_default_str();
    cmd.add_option("--num-classes", c.num_classes)->capture_default_str();
    cmd.add_flag("--train-detector", c.train_detector, "dt: train the detector on the frozen generator afterwards");
    cmd.add_option("--detector-epochs", c.detector_epochs, "dt detector phase epochs (0: --epochs)")->capture_default_str();
    cmd.add_option("--dense-layers", c.generator.dense_layers)->capture_default_str();
    cmd.add_option("--growth", c.generator.growth)->capture_default_str();
    cmd.add_option("--conf-threshold", c.decode.conf_threshold)->capture_default_str();
    cmd.add_option("--nms-iou", c.decode.nms_iou)->capture_default_str();
    cmd.add_option("--dtype", a.dtype)->check(CLI::IsMember({"float32", "float64"}))->capture_default_str();
    cmd.add_option("--resume", a.resume, "Continue from a checkpoint")->check(CLI::ExistingFile);
}

int cmd_synth(SynthArgs& a, std::ostream& out) {
    a.config.split = parse_split(a.split);
    const auto manifest = synth_dataset(a.config, a.out_dir);
    out << "wrote " << manifest.entries.size() << " pairs to " << (fs::path(a.out_dir) / kManifestFileName).string()
        << '\n';
    return kExitOk;
}

int cmd_train(TrainArgs& a, std::ostream& out, std::ostream& err) {
    auto& c = a.config;
    c.strategy = parse_strategy(a.strategy);
    c.mask_source = parse_mask_source(a.mask_source);
    c.dtype = a.dtype == "float64" ? torch::kDouble : torch::kFloat;
    c.flags = {.use_dt_critic = !a.no_dt_critic, .use_dd_critic = !a.no_dd_critic, .use_sdw = !a.no_sdw,
               .use_mask = !a.no_mask};
    c.validate();

    const auto manifest = read_manifest(a.manifest);
    if (manifest.entries.empty()) throw TrainingError("manifest has no entries");
    fs::create_directories(a.out_dir);
    std::ofstream log(fs::path(a.out_dir) / "train_log.jsonl", a.resume.empty() ? std::ios::trunc : std::ios::app);
    if (!log) throw IoError("cannot write the step log in '" + a.out_dir + "'");

    std::vector<std::string> warnings;
    auto state = a.resume.empty() ? TrainState(c) : load_checkpoint(a.resume, c, &warnings);
    for (const auto& w : warnings) err << "warning: " << w << '\n';

    TrainHooks hooks;
    hooks.checkpoint_dir = fs::path(a.out_dir);
    hooks.on_step = [&](const nlohmann::json& line) { log << line.dump() << '\n'; };
    const auto data = TrainingData::from_manifest(manifest, state.config.mask_source);
    train(state, data, hooks);
    if (state.config.strategy == Strategy::dt && state.config.train_detector) train_detector_on_frozen(state, data, hooks);
    const auto final_path = fs::path(a.out_dir) / "final.pt";
    save_checkpoint(state, final_path);
    out << "trained " << state.step << " steps (" << to_string(state.config.strategy) << "), checkpoint "
        << final_path.string() << '\n';
    return kExitOk;
}

Fuser checkpoint_fuser(const std::string& path, torch::Dtype* dtype) {
    auto state = load_checkpoint(path);
    *dtype = state.config.dtype;
    return generator_fuser(state.generator);
}

int cmd_fuse(FuseArgs& a, std::ostream& out) {
    torch::Dtype dtype = torch::kFloat;
    const auto fuser = checkpoint_fuser(a.checkpoint, &dtype);
    if (!a.manifest.empty()) {
        const auto manifest = read_manifest(a.manifest);
        const auto dir = manifest.root_path / "fused";
        fs::create_directories(dir);
        for (const auto& pair : load_all(manifest)) write_png(fuse_pair(pair, fuser, dtype), dir / (pair.pair_id + ".png"));
        out << "fused " << manifest.entries.size() << " pairs into " << dir.string() << '\n';
        return kExitOk;
    }
    const auto infrared = read_png(a.infrared);
    const auto visible = read_png(a.visible);
    if (infrared.shape() != visible.shape()) {
        throw ShapeError("infrared " + infrared.shape().str() + " and visible " + visible.shape().str() + " differ");
    }
    auto fused = fuser(to_tensor(infrared, dtype), to_tensor(visible, dtype));
    write_png(image_from_tensor(fused.to(torch::kDouble).clamp(0.0, 1.0)), a.output);
    out << "wrote " << a.output << '\n';
    return kExitOk;
}

void emit(const EvalReport& report, const std::string& path, std::ostream& out) {
    if (!path.empty()) report.write_jsonl(path);
    else
        for (const auto& line : report.jsonl()) out << line.dump() << '\n';
    out << report.summary_table();
}

int cmd_eval_fusion(EvalArgs& a, std::ostream& out) {
    const auto manifest = read_manifest(a.manifest);
    torch::Dtype dtype = torch::kFloat;
    Fuser fuser;
    std::string label;
    if (a.oracle == "copy") {
        fuser = copy_infrared_fuser();
        label = "copy-infrared";
    } else if (a.oracle == "average") {
        fuser = average_fuser();
        label = "average";
    } else {
        fuser = checkpoint_fuser(a.checkpoint, &dtype);
        label = "generator";
    }
    std::optional<fs::path> fused_dir;
    if (a.write_fused) fused_dir = manifest.root_path / "fused";
    auto report = eval_fusion(manifest, fuser, fused_dir, dtype);
    report.label = "fusion/" + label;
    emit(report, a.report, out);
    return kExitOk;
}

int cmd_eval_detect(EvalArgs& a, std::ostream& out) {
    const auto manifest = read_manifest(a.manifest);
    auto state = load_checkpoint(a.checkpoint);
    auto report = eval_detection(manifest, state.generator, state.detector, state.config.decode, state.config.dtype);
    emit(report, a.report, out);
    return kExitOk;
}

int cmd_gradcheck(GradcheckArgs& a, std::ostream& out) {
    bool ok = true;
    std::vector<nlohmann::json> lines;
    for (const auto& s : run_gradient_suites(a.options)) {
        ok = ok && s.passed();
        lines.push_back(s.to_json());
        out << (s.passed() ? "PASS " : "FAIL ") << s.name << " max_rel_err=" << s.max_relative_error
            << " trials=" << s.trials << '\n';
    }
    for (const auto& d : run_decomposition_checks({0.0, 0.5, 1.0}, a.options.seed)) {
        ok = ok && d.passed();
        lines.push_back(d.to_json());
        out << (d.passed() ? "PASS " : "FAIL ") << "decomposition lambda=" << d.lambda
            << " max_residual=" << d.report.max_residual << '\n';
    }
    if (!a.report.empty()) {
        std::ofstream f(a.report);
        if (!f) throw IoError("cannot write report '" + a.report + "'");
        for (const auto& l : lines) f << l.dump() << '\n';
    }
    return ok ? kExitOk : kExitFailure;
}

}  // namespace

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
    CLI::App app{"Infrared-visible fusion with dual adversarial critics and a toy detector", "dualfuse"};
    app.require_subcommand(1);

    SynthArgs synth_args;
    auto* synth = app.add_subcommand("synth", "Generate a seeded synthetic paired dataset");
    synth->add_option("--out", synth_args.out_dir, "Output directory")->required();
    synth->add_option("--count", synth_args.config.count)->capture_default_str();
    synth->add_option("--size", synth_args.config.image_size, "Image side, a multiple of 16")->capture_default_str();
    synth->add_option("--seed", synth_args.config.seed)->capture_default_str();
    synth->add_option("--split", synth_args.split)->check(CLI::IsMember({"train", "val", "test"}))->capture_default_str();
    synth->add_option("--prefix", synth_args.config.id_prefix)->capture_default_str();
    synth->add_option("--min-targets", synth_args.config.min_targets)->capture_default_str();
    synth->add_option("--max-targets", synth_args.config.max_targets)->capture_default_str();
    synth->add_option("--texture", synth_args.config.visible_texture)->capture_default_str();
    synth->add_option("--noise", synth_args.config.noise_sigma)->capture_default_str();

    TrainArgs train_args;
    auto* train_cmd = app.add_subcommand("train", "Train with the dt, tt or ct regime");
    add_train_options(*train_cmd, train_args);

    FuseArgs fuse_args;
    auto* fuse = app.add_subcommand("fuse", "Fuse one pair or every pair of a manifest");
    fuse->add_option("--checkpoint", fuse_args.checkpoint)->required()->check(CLI::ExistingFile);
    auto* fuse_manifest = fuse->add_option("--manifest", fuse_args.manifest)->check(CLI::ExistingFile);
    auto* fuse_ir = fuse->add_option("--ir", fuse_args.infrared)->check(CLI::ExistingFile);
    auto* fuse_vis = fuse->add_option("--vis", fuse_args.visible)->check(CLI::ExistingFile);
    auto* fuse_out = fuse->add_option("--output", fuse_args.output, "Fused PNG for --ir/--vis");
    fuse_ir->needs(fuse_vis, fuse_out);
    fuse_manifest->excludes(fuse_ir);
    fuse->callback([&] {
        if (fuse_args.manifest.empty() && fuse_args.infrared.empty()) throw CLI::ValidationError("give --manifest or --ir/--vis/--output");
    });

    EvalArgs fusion_args;
    auto* eval_f = app.add_subcommand("eval-fusion", "Fusion metrics over a manifest");
    eval_f->add_option("--manifest", fusion_args.manifest)->required()->check(CLI::ExistingFile);
    auto* ef_ckpt = eval_f->add_option("--checkpoint", fusion_args.checkpoint)->check(CLI::ExistingFile);
    auto* ef_oracle = eval_f->add_option("--oracle", fusion_args.oracle, "Reference fuser instead of a checkpoint")
                          ->check(CLI::IsMember({"copy", "average"}));
    ef_ckpt->excludes(ef_oracle);
    eval_f->add_option("--report", fusion_args.report, "JSON-lines report path (default: stdout)");
    eval_f->add_flag("--write-fused", fusion_args.write_fused, "Write fused PNGs next to the manifest");
    eval_f->callback([&] {
        if (fusion_args.checkpoint.empty() && fusion_args.oracle.empty()) throw CLI::ValidationError("give --checkpoint or --oracle");
    });

    EvalArgs detect_args;
    auto* eval_d = app.add_subcommand("eval-detect", "mAP@0.5 for fused, infrared-only and visible-only input");
    eval_d->add_option("--manifest", detect_args.manifest)->required()->check(CLI::ExistingFile);
    eval_d->add_option("--checkpoint", detect_args.checkpoint)->required()->check(CLI::ExistingFile);
    eval_d->add_option("--report", detect_args.report, "JSON-lines report path (default: stdout)");

    GradcheckArgs grad_args;
    auto* grad = app.add_subcommand("gradcheck", "Finite-difference gradient suites and the decomposition check");
    grad->add_option("--trials", grad_args.options.trials)->capture_default_str();
    grad->add_option("--seed", grad_args.options.seed)->capture_default_str();
    grad->add_option("--report", grad_args.report, "JSON-lines report path");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e, out, err);
        return code == 0 ? kExitOk : kExitUsage;
    }

    try {
        if (*synth) return cmd_synth(synth_args, out);
        if (*train_cmd) return cmd_train(train_args, out, err);
        if (*fuse) return cmd_fuse(fuse_args, out);
        if (*eval_f) return cmd_eval_fusion(fusion_args, out);
        if (*eval_d) return cmd_eval_detect(detect_args, out);
        if (*grad) return cmd_gradcheck(grad_args, out);
    } catch (const std::exception& e) {
        err << "error: " << e.what() << '\n';
        return kExitFailure;
    }
    return kExitUsage;
}

}  // namespace dualfuse
