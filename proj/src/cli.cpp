#include "sketchdiff/cli.hpp"

#include <algorithm>
#include <csignal>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <iterator>
#include <optional>
#include <pthread.h>
#include <string>
#include <thread>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "sketchdiff/checkpoint.hpp"
#include "sketchdiff/conditions.hpp"
#include "sketchdiff/metrics.hpp"
#include "sketchdiff/service.hpp"
#include "sketchdiff/trainer.hpp"

namespace sketchdiff {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::vector<std::uint8_t> read_bytes(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open " + path.string());
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

std::string read_base64(const fs::path& path) { return base64_encode(read_bytes(path)); }

std::vector<fs::path> list_pngs(const fs::path& dir) {
    if (!fs::is_directory(dir)) throw std::runtime_error(dir.string() + " is not a directory");
    std::vector<fs::path> out;
    for (const auto& e : fs::directory_iterator(dir)) {
        if (!e.is_regular_file()) continue;
        std::string ext = e.path().extension().string();
        std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
        if (ext == ".png") out.push_back(e.path());
    }
    std::sort(out.begin(), out.end());
    return out;
}

fs::path resolve_against(const fs::path& base_dir, const fs::path& p) {
    return p.is_absolute() ? p : base_dir / p;
}

// ---------------------------------------------------------------------------

struct TrainArgs {
    std::string config;
    int stage = 1;
    std::string resume;
};

int run_train(const TrainArgs& a, std::ostream& out, std::ostream& err) {
    const fs::path config_path = a.config;
    std::ifstream in(config_path);
    if (!in) throw std::runtime_error("cannot open config " + config_path.string());
    json j = json::parse(in);
    if (!j.contains("manifest")) throw std::runtime_error("config is missing \"manifest\"");
    const fs::path base = config_path.parent_path();
    const fs::path manifest = resolve_against(base, j.at("manifest").get<std::string>());
    const fs::path output_dir = resolve_against(base, j.value("output_dir", std::string("run")));
    j["stage"] = a.stage;
    const TrainConfig cfg = TrainConfig::from_json(j);
    cfg.validate();

    ModelSpec spec = j.contains("model") ? ModelSpec::from_json(j["model"]) : ModelSpec{};
    std::optional<TrainState> state;
    if (!a.resume.empty()) {
        ModelSpec stored;
        const NetworkConfig* expected = j.contains("model") ? &spec.network : nullptr;
        state = load_checkpoint(a.resume, &stored, expected);
        if (!j.contains("model")) spec = stored;
        out << "resumed " << a.resume << " at step " << state->step << " (stage " << state->stage << ")\n";
    }
    const UNet net(spec.network);
    spec.network.check_input_extent(spec.height, spec.width);
    if (!state) state = init_train_state(net, cfg.seed);

    DatasetStream stream(manifest, spec.height, spec.width);
    std::vector<RecordError> errors;
    const std::vector<TrainingTriplet> data = collect_triplets(stream, &errors);
    for (const auto& e : errors) err << "skipping record " << e.source_id << ": " << e.message << "\n";
    if (data.empty()) throw std::runtime_error("no usable training records in " + manifest.string());
    out << "training stage " << cfg.stage << " on " << data.size() << " triplets for " << cfg.steps
        << " steps\n";

    fs::create_directories(output_dir);
    std::ofstream log(output_dir / "progress.jsonl", std::ios::app);
    const std::string stage_tag = "stage" + std::to_string(cfg.stage);
    TrainHooks hooks;
    hooks.dump_dir = output_dir;
    hooks.on_step = [&](const StepLog& s) { log << s.to_json().dump() << "\n" << std::flush; };
    hooks.on_checkpoint = [&](const TrainState& s) {
        save_checkpoint(s, spec, output_dir / (stage_tag + "_step" + std::to_string(s.step) + ".ckpt"));
        save_checkpoint(s, spec, output_dir / "latest.ckpt");
    };
    const TrainState final_state = train_stage(std::move(*state), cfg, data, spec.schedule(), net, hooks, &spec);
    const fs::path final_path = output_dir / (stage_tag + "_final.ckpt");
    save_checkpoint(final_state, spec, final_path);
    save_checkpoint(final_state, spec, output_dir / "latest.ckpt");
    out << "wrote " << final_path.string() << " at step " << final_state.step << "\n";
    return 0;
}

// ---------------------------------------------------------------------------

struct SampleArgs {
    std::string ckpt, sketch, stroke, reference, out;
    double s_sketch = 1.0, s_stroke = 1.0, realism = 0.0;
    std::uint64_t seed = 0;
    int steps = 0;
    bool raw_params = false;
};

int run_sample(const SampleArgs& a, std::ostream& out) {
    const auto model = LoadedModel::from_checkpoint(a.ckpt, a.raw_params);
    GenerateRequest req;
    if (!a.sketch.empty()) req.sketch_png = read_base64(a.sketch);
    if (!a.stroke.empty()) req.stroke_png = read_base64(a.stroke);
    if (!a.reference.empty()) req.reference_png = read_base64(a.reference);
    req.s_sketch = a.s_sketch;
    req.s_stroke = a.s_stroke;
    req.realism = a.realism;
    req.seed = a.seed;
    if (a.steps > 0) req.steps = a.steps;
    const ImageBuffer img = generate(*model, prepare_job(req, model->spec));
    write_png(a.out, model_to_raster(img));
    out << "wrote " << a.out << "\n";
    return 0;
}

// ---------------------------------------------------------------------------

struct EvaluateArgs {
    std::string ckpt, real, out;
    int n = 0;
    std::uint64_t seed = 0;
    int steps = 0;
    double s_sketch = 1.0, s_stroke = 1.0;
};

int run_evaluate(const EvaluateArgs& a, std::ostream& out) {
    const auto model = LoadedModel::from_checkpoint(a.ckpt);
    std::vector<fs::path> files = list_pngs(a.real);
    if (files.size() > static_cast<std::size_t>(a.n)) files.resize(static_cast<std::size_t>(a.n));
    if (files.size() < 2) throw std::runtime_error("evaluate needs at least 2 real images");

    std::vector<ImageBuffer> real, fake;
    double perceptual = 0.0;
    const auto embedder = default_embedder();
    for (std::size_t i = 0; i < files.size(); ++i) {
        ImageBuffer img = load_image(files[i], model->spec.height, model->spec.width);
        const ImageBuffer sketch = extract_sketch(img);
        GenerationJob job;
        job.cond = {sketch, extract_strokes(img, sketch)};
        job.settings.s_sketch = a.s_sketch;
        job.settings.s_stroke = a.s_stroke;
        job.seed = a.seed + i;
        job.steps = a.steps;
        ImageBuffer sample = generate(*model, job);
        perceptual += perceptual_distance(sample, img, *embedder);
        real.push_back(std::move(img));
        fake.push_back(std::move(sample));
    }
    const double fid = frechet_distance(feature_stats(real, *embedder), feature_stats(fake, *embedder));
    const json result = {{"fid", fid},
                         {"perceptual", perceptual / static_cast<double>(files.size())},
                         {"n_real", real.size()},
                         {"n_fake", fake.size()},
                         {"embedder", embedder->id()}};
    std::ofstream o(a.out);
    if (!o) throw std::runtime_error("cannot write " + a.out);
    o << result.dump(2) << "\n";
    out << result.dump() << "\n";
    return 0;
}

// ---------------------------------------------------------------------------

struct ExtractArgs {
    std::string in, out;
    double low = CannyThresholds{}.low;
    double high = CannyThresholds{}.high;
};

int run_extract(const ExtractArgs& a, std::ostream& out) {
    if (!(a.low >= 0.0 && a.low < a.high)) throw std::runtime_error("thresholds need 0 <= low < high");
    const std::vector<fs::path> files = list_pngs(a.in);
    fs::create_directories(a.out);
    const CannyThresholds th{a.low, a.high};
    for (const auto& f : files) {
        const ImageBuffer img = raster_to_model(read_png(f, 3));
        const ImageBuffer sketch = extract_sketch(img, th);
        const ImageBuffer stroke = extract_strokes(img, sketch);
        const std::string stem = f.stem().string();
        write_png(fs::path(a.out) / (stem + "_sketch.png"), model_to_raster(sketch));
        write_png(fs::path(a.out) / (stem + "_stroke.png"), model_to_raster(stroke));
    }
    out << "extracted conditions for " << files.size() << " images\n";
    return 0;
}

// ---------------------------------------------------------------------------

struct ServeArgs {
    std::string ckpt, host = "127.0.0.1", ui;
    int port = 8000;
    int workers = 1;
};

int run_serve(ServeArgs a, std::ostream& out) {
    if (const char* env = std::getenv("VISIOBLEND_PORT"); env && *env) {
        try {
            a.port = std::stoi(env);
        } catch (const std::exception&) {
            throw std::runtime_error(std::string("VISIOBLEND_PORT is not a port number: ") + env);
        }
    }
    std::shared_ptr<const LoadedModel> model;
    if (!a.ckpt.empty()) model = LoadedModel::from_checkpoint(a.ckpt);
    ServiceOptions opts;
    opts.jobs.workers = a.workers;
    if (!a.ui.empty()) opts.ui_dir = a.ui;

    sigset_t signals;
    sigemptyset(&signals);
    sigaddset(&signals, SIGINT);
    sigaddset(&signals, SIGTERM);
    pthread_sigmask(SIG_BLOCK, &signals, nullptr);

    InferenceService service(model, opts);
    const int port = service.bind(a.host, a.port);
    out << "listening on http://" << a.host << ":" << port << (model ? "" : " (no model loaded)") << "\n"
        << std::flush;
    std::thread waiter([&] {
        int sig = 0;
        sigwait(&signals, &sig);
        service.stop();
    });
    service.listen();
    pthread_kill(waiter.native_handle(), SIGTERM);
    waiter.join();
    return 0;
}

}  // namespace

int cli_dispatch(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
    CLI::App app{"Sketch- and stroke-conditioned diffusion image generator", "sketchdiff"};
    app.require_subcommand(1);

    TrainArgs train;
    auto* t = app.add_subcommand("train", "Train a model stage from a JSON config");
    t->add_option("--config", train.config, "Training config JSON")->required()->check(CLI::ExistingFile);
    t->add_option("--stage", train.stage, "Training stage")->required()->check(CLI::IsMember({1, 2}));
    t->add_option("--resume", train.resume, "Checkpoint to continue from")->check(CLI::ExistingFile);

    SampleArgs sample;
    auto* s = app.add_subcommand("sample", "Generate one image");
    s->add_option("--ckpt", sample.ckpt, "Model checkpoint")->required()->check(CLI::ExistingFile);
    s->add_option("--sketch", sample.sketch, "Grayscale sketch PNG")->check(CLI::ExistingFile);
    s->add_option("--stroke", sample.stroke, "RGB stroke PNG")->check(CLI::ExistingFile);
    s->add_option("--reference", sample.reference, "RGB reference PNG for refinement")->check(CLI::ExistingFile);
    s->add_option("--s-sketch", sample.s_sketch, "Sketch guidance scale")->check(CLI::NonNegativeNumber);
    s->add_option("--s-stroke", sample.s_stroke, "Stroke guidance scale")->check(CLI::NonNegativeNumber);
    s->add_option("--realism", sample.realism, "Realism in [0, 1]")->check(CLI::Range(0.0, 1.0));
    s->add_option("--seed", sample.seed, "Sampler seed");
    s->add_option("--steps", sample.steps, "Respaced step count")->check(CLI::PositiveNumber);
    s->add_flag("--raw-params", sample.raw_params, "Use raw weights instead of EMA weights");
    s->add_option("--out", sample.out, "Output PNG")->required();

    EvaluateArgs eval;
    auto* e = app.add_subcommand("evaluate", "Compute Frechet and patch distances against real images");
    e->add_option("--ckpt", eval.ckpt, "Model checkpoint")->required()->check(CLI::ExistingFile);
    e->add_option("--real", eval.real, "Directory of real PNGs")->required()->check(CLI::ExistingDirectory);
    e->add_option("--n", eval.n, "Number of images")->required()->check(CLI::Range(2, 1 << 20));
    e->add_option("--out", eval.out, "Output JSON")->required();
    e->add_option("--seed", eval.seed, "Base sampler seed");
    e->add_option("--steps", eval.steps, "Respaced step count")->check(CLI::PositiveNumber);
    e->add_option("--s-sketch", eval.s_sketch, "Sketch guidance scale")->check(CLI::NonNegativeNumber);
    e->add_option("--s-stroke", eval.s_stroke, "Stroke guidance scale")->check(CLI::NonNegativeNumber);

    ExtractArgs extract;
    auto* x = app.add_subcommand("extract-conditions", "Write sketch and stroke PNGs for a directory of images");
    x->add_option("--in", extract.in, "Input directory")->required()->check(CLI::ExistingDirectory);
    x->add_option("--out", extract.out, "Output directory")->required();
    x->add_option("--low", extract.low, "Low hysteresis threshold")->check(CLI::NonNegativeNumber);
    x->add_option("--high", extract.high, "High hysteresis threshold")->check(CLI::NonNegativeNumber);

    ServeArgs serve;
    auto* v = app.add_subcommand("serve", "Run the HTTP inference service");
    v->add_option("--ckpt", serve.ckpt, "Model checkpoint")->check(CLI::ExistingFile);
    v->add_option("--port", serve.port, "Port (VISIOBLEND_PORT overrides)")->check(CLI::Range(0, 65535));
    v->add_option("--host", serve.host, "Bind address");
    v->add_option("--workers", serve.workers, "Concurrent sampling loops")->check(CLI::PositiveNumber);
    v->add_option("--ui", serve.ui, "Static UI bundle directory")->check(CLI::ExistingDirectory);

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& ex) {
        return app.exit(ex, out, err);
    } catch (const CLI::CallForAllHelp& ex) {
        return app.exit(ex, out, err);
    } catch (const CLI::ParseError& ex) {
        app.exit(ex, err, err);
        const CLI::App* sub = app.get_subcommands().empty() ? &app : app.get_subcommands().front();
        err << sub->help();
        return 2;
    }

    try {
        if (t->parsed()) return run_train(train, out, err);
        if (s->parsed()) return run_sample(sample, out);
        if (e->parsed()) return run_evaluate(eval, out);
        if (x->parsed()) return run_extract(extract, out);
        if (v->parsed()) return run_serve(serve, out);
    } catch (const std::exception& ex) {
        err << "error: " << ex.what() << "\n";
        return 1;
    }
    return 2;
}

int cli_dispatch(int argc, const char* const* argv) { return cli_dispatch(argc, argv, std::cout, std::cerr); }

}  // namespace sketchdiff
