#include "sketchdiff/service.hpp"

#include <algorithm>
#include <condition_variable>
#include <cstdio>
#include <deque>
#include <map>
#include <mutex>
#include <random>
#include <thread>

#include <httplib.h>
#include <openssl/evp.h>

namespace sketchdiff {

using nlohmann::json;

// ---------------------------------------------------------------------------
// base64

std::string base64_encode(std::span<const std::uint8_t> bytes) {
    std::string out(4 * ((bytes.size() + 2) / 3) + 1, '\0');
    const int n = EVP_EncodeBlock(reinterpret_cast<unsigned char*>(out.data()), bytes.data(),
                                  static_cast<int>(bytes.size()));
    out.resize(static_cast<std::size_t>(n));
    return out;
}

std::vector<std::uint8_t> base64_decode(std::string_view text) {
    if (text.starts_with("data:")) {
        const auto comma = text.find(',');
        if (comma == std::string_view::npos) throw std::invalid_argument("malformed data URL");
        text.remove_prefix(comma + 1);
    }
    if (text.size() % 4 != 0) throw std::invalid_argument("base64 length is not a multiple of 4");
    std::vector<std::uint8_t> out(text.size() / 4 * 3);
    const int n = EVP_DecodeBlock(out.data(), reinterpret_cast<const unsigned char*>(text.data()),
                                  static_cast<int>(text.size()));
    if (n < 0) throw std::invalid_argument("invalid base64");
    std::size_t pad = 0;
    if (!text.empty() && text.back() == '=') ++pad;
    if (text.size() > 1 && text[text.size() - 2] == '=') ++pad;
    out.resize(static_cast<std::size_t>(n) - pad);
    return out;
}

// ---------------------------------------------------------------------------
// Model

std::shared_ptr<const LoadedModel> LoadedModel::from_checkpoint(const std::filesystem::path& path,
                                                                bool raw_params) {
    CheckpointContents c = read_checkpoint(path);
    auto m = std::make_shared<LoadedModel>();
    m->spec = c.spec;
    m->schedule = c.spec.schedule();
    m->net = std::make_shared<const UNet>(c.spec.network);
    m->params = std::make_shared<const ParameterSet>(c.ema && !raw_params ? std::move(*c.ema) : std::move(c.params));
    m->denoiser = std::make_shared<const NetworkDenoiser>(*m->net, *m->params);
    return m;
}

std::shared_ptr<const LoadedModel> LoadedModel::from_denoiser(ModelSpec spec,
                                                              std::shared_ptr<const Denoiser> denoiser) {
    auto m = std::make_shared<LoadedModel>();
    m->schedule = spec.schedule();
    m->spec = std::move(spec);
    m->denoiser = std::move(denoiser);
    return m;
}

// ---------------------------------------------------------------------------
// Requests

namespace {

double number_field(const json& j, const char* key, double fallback) {
    if (!j.contains(key) || j[key].is_null()) return fallback;
    if (!j[key].is_number()) throw RequestError(key, std::string(key) + " must be a number");
    return j[key].get<double>();
}

std::optional<std::string> string_field(const json& j, const char* key) {
    if (!j.contains(key) || j[key].is_null()) return std::nullopt;
    if (!j[key].is_string()) throw RequestError(key, std::string(key) + " must be a base64 string");
    return j[key].get<std::string>();
}

ImageBuffer decode_field(const std::string& field, const std::string& b64, int channels, const ModelSpec& spec) {
    Raster8 raster;
    try {
        raster = decode_png(base64_decode(b64), channels);
    } catch (const std::exception& e) {
        throw RequestError(field, field + " is not a valid base64 PNG: " + e.what());
    }
    if (raster.height != spec.height || raster.width != spec.width) {
        throw RequestError(field, field + " must be " + std::to_string(spec.height) + "x" +
                                      std::to_string(spec.width) + ", got " + std::to_string(raster.height) +
                                      "x" + std::to_string(raster.width));
    }
    return channels == 1 ? binarize_sketch(raster) : raster_to_model(raster);
}

}  // namespace

GenerateRequest GenerateRequest::from_json(const json& j) {
    if (!j.is_object()) throw RequestError("", "request body must be a JSON object");
    GenerateRequest r;
    r.sketch_png = string_field(j, "sketch_png");
    r.stroke_png = string_field(j, "stroke_png");
    r.reference_png = string_field(j, "reference_png");
    r.s_sketch = number_field(j, "s_sketch", r.s_sketch);
    r.s_stroke = number_field(j, "s_stroke", r.s_stroke);
    r.realism = number_field(j, "realism", r.realism);
    if (j.contains("seed") && !j["seed"].is_null()) {
        if (!j["seed"].is_number_integer() || j["seed"].get<std::int64_t>() < 0) {
            throw RequestError("seed", "seed must be a non-negative integer");
        }
        r.seed = j["seed"].get<std::uint64_t>();
    }
    if (j.contains("steps") && !j["steps"].is_null()) {
        if (!j["steps"].is_number_integer()) throw RequestError("steps", "steps must be an integer");
        r.steps = j["steps"].get<int>();
    }
    return r;
}

json GenerateRequest::to_json() const {
    json j = {{"s_sketch", s_sketch}, {"s_stroke", s_stroke}, {"realism", realism}};
    if (sketch_png) j["sketch_png"] = *sketch_png;
    if (stroke_png) j["stroke_png"] = *stroke_png;
    if (reference_png) j["reference_png"] = *reference_png;
    if (seed) j["seed"] = *seed;
    if (steps) j["steps"] = *steps;
    return j;
}

GenerationJob prepare_job(const GenerateRequest& req, const ModelSpec& spec) {
    if (!(req.s_sketch >= 0.0)) throw RequestError("s_sketch", "s_sketch must be ≥ 0");
    if (!(req.s_stroke >= 0.0)) throw RequestError("s_stroke", "s_stroke must be ≥ 0");
    if (!(req.realism >= 0.0 && req.realism <= 1.0)) throw RequestError("realism", "realism must be in [0, 1]");
    if (req.steps && (*req.steps < 1 || *req.steps > spec.T)) {
        throw RequestError("steps", "steps must be in [1, " + std::to_string(spec.T) + "]");
    }
    GenerationJob job;
    if (req.sketch_png) job.cond.sketch = decode_field("sketch_png", *req.sketch_png, 1, spec);
    if (req.stroke_png) job.cond.stroke = decode_field("stroke_png", *req.stroke_png, 3, spec);
    job.settings.s_sketch = req.s_sketch;
    job.settings.s_stroke = req.s_stroke;
    apply_realism(job.settings, req.realism);
    if (req.realism > 0.0) {
        if (req.reference_png) {
            job.settings.reference = decode_field("reference_png", *req.reference_png, 3, spec);
        } else if (job.cond.stroke) {
            job.settings.reference = job.cond.stroke;
        } else {
            throw RequestError("realism", "realism > 0 needs reference_png or stroke_png");
        }
        if (spec.height % job.settings.realism_N != 0 || spec.width % job.settings.realism_N != 0) {
            throw RequestError("realism", "model resolution is not divisible by the realism filter factor");
        }
    }
    job.seed = req.seed ? *req.seed : std::random_device{}();
    job.steps = req.steps.value_or(0);
    return job;
}

ImageBuffer generate(const LoadedModel& model, const GenerationJob& job, const ProgressFn& progress) {
    Rng rng(job.seed);
    SamplerOptions opts;
    opts.progress = progress;
    if (job.steps > 0 && job.steps < model.schedule.T) {
        RespacedSchedule rs = respace(model.schedule, job.steps);
        opts.model_timesteps = rs.model_timesteps;
        return sample_loop(*model.denoiser, model.spec.height, model.spec.width, job.cond, job.settings,
                           rs.schedule, rng, opts);
    }
    return sample_loop(*model.denoiser, model.spec.height, model.spec.width, job.cond, job.settings,
                       model.schedule, rng, opts);
}

// ---------------------------------------------------------------------------
// Jobs

std::string to_string(JobStatus s) {
    switch (s) {
        case JobStatus::queued: return "queued";
        case JobStatus::running: return "running";
        case JobStatus::done: return "done";
        case JobStatus::failed: return "failed";
    }
    return "unknown";
}

namespace {

double unix_seconds(JobRecord::Clock::time_point tp) {
    return std::chrono::duration<double>(tp.time_since_epoch()).count();
}

std::string uuid4() {
    static std::mutex mu;
    static std::mt19937_64 gen{std::random_device{}()};
    std::uint64_t hi, lo;
    {
        std::lock_guard lock(mu);
        hi = gen();
        lo = gen();
    }
    hi = (hi & 0xffffffffffff0fffULL) | 0x0000000000004000ULL;
    lo = (lo & 0x3fffffffffffffffULL) | 0x8000000000000000ULL;
    char buf[37];
    std::snprintf(buf, sizeof buf, "%08x-%04x-%04x-%04x-%012llx", static_cast<unsigned>(hi >> 32),
                  static_cast<unsigned>((hi >> 16) & 0xffff), static_cast<unsigned>(hi & 0xffff),
                  static_cast<unsigned>(lo >> 48), static_cast<unsigned long long>(lo & 0xffffffffffffULL));
    return buf;
}

}  // namespace

json JobRecord::to_json() const {
    json j = {{"job_id", job_id},
              {"status", sketchdiff::to_string(status)},
              {"progress", progress},
              {"created_at", unix_seconds(created_at)}};
    j["result_png"] = result_png ? json(*result_png) : json(nullptr);
    j["error"] = error ? json(*error) : json(nullptr);
    j["finished_at"] = finished_at ? json(unix_seconds(*finished_at)) : json(nullptr);
    return j;
}

struct JobStore::Impl {
    std::shared_ptr<const LoadedModel> model;
    JobStoreOptions options;
    mutable std::mutex mu;
    mutable std::condition_variable changed;
    std::condition_variable work_ready;
    std::map<std::string, JobRecord> records;
    std::deque<std::pair<std::string, GenerationJob>> queue;
    std::deque<std::string> finished_order;
    bool stopping = false;
    std::vector<std::thread> workers;

    void evict_locked() {
        const auto now = JobRecord::Clock::now();
        while (!finished_order.empty()) {
            auto it = records.find(finished_order.front());
            const bool expired = it == records.end() || !it->second.finished_at ||
                                 now - *it->second.finished_at > options.retention;
            if (!expired && finished_order.size() <= options.max_finished) break;
            if (it != records.end()) records.erase(it);
            finished_order.pop_front();
        }
    }

    void run() {
        for (;;) {
            std::pair<std::string, GenerationJob> item;
            {
                std::unique_lock lock(mu);
                work_ready.wait(lock, [&] { return stopping || !queue.empty(); });
                if (stopping) return;
                item = std::move(queue.front());
                queue.pop_front();
                records[item.first].status = JobStatus::running;
            }
            changed.notify_all();
            const std::string& id = item.first;
            auto progress = [&](int step, int total) {
                std::lock_guard lock(mu);
                auto it = records.find(id);
                if (it != records.end()) it->second.progress = static_cast<double>(step) / total;
            };
            std::optional<std::string> png;
            std::optional<std::string> error;
            try {
                const ImageBuffer out = generate(*model, item.second, progress);
                png = base64_encode(encode_png(model_to_raster(out)));
            } catch (const std::exception& e) {
                error = e.what();
            }
            {
                std::lock_guard lock(mu);
                auto& r = records[id];
                r.finished_at = JobRecord::Clock::now();
                if (png) {
                    r.status = JobStatus::done;
                    r.progress = 1.0;
                    r.result_png = std::move(png);
                } else {
                    r.status = JobStatus::failed;
                    r.error = std::move(error);
                }
                finished_order.push_back(id);
                evict_locked();
            }
            changed.notify_all();
        }
    }
};

JobStore::JobStore(std::shared_ptr<const LoadedModel> model, JobStoreOptions options)
    : impl_(std::make_unique<Impl>()) {
    impl_->model = std::move(model);
    impl_->options = options;
    const int n = std::max(1, options.workers);
    for (int i = 0; i < n; ++i) impl_->workers.emplace_back([this] { impl_->run(); });
}

JobStore::~JobStore() {
    {
        std::lock_guard lock(impl_->mu);
        impl_->stopping = true;
    }
    impl_->work_ready.notify_all();
    for (auto& t : impl_->workers) t.join();
}

std::string JobStore::submit(GenerationJob job) {
    JobRecord rec;
    rec.job_id = uuid4();
    rec.created_at = JobRecord::Clock::now();
    {
        std::lock_guard lock(impl_->mu);
        impl_->evict_locked();
        if (impl_->queue.size() >= impl_->options.max_queued) throw QueueFull();
        impl_->records.emplace(rec.job_id, rec);
        impl_->queue.emplace_back(rec.job_id, std::move(job));
    }
    impl_->work_ready.notify_one();
    return rec.job_id;
}

std::optional<JobRecord> JobStore::get(const std::string& id) const {
    std::lock_guard lock(impl_->mu);
    auto it = impl_->records.find(id);
    if (it == impl_->records.end()) return std::nullopt;
    return it->second;
}

std::size_t JobStore::size() const {
    std::lock_guard lock(impl_->mu);
    return impl_->records.size();
}

std::optional<JobRecord> JobStore::wait(const std::string& id, std::chrono::milliseconds timeout) const {
    std::unique_lock lock(impl_->mu);
    std::optional<JobRecord> out;
    impl_->changed.wait_for(lock, timeout, [&] {
        auto it = impl_->records.find(id);
        if (it == impl_->records.end()) return true;
        if (it->second.status == JobStatus::done || it->second.status == JobStatus::failed) {
            out = it->second;
            return true;
        }
        return false;
    });
    if (!out) {
        auto it = impl_->records.find(id);
        if (it != impl_->records.end()) out = it->second;
    }
    return out;
}

// ---------------------------------------------------------------------------
// HTTP

struct InferenceService::Impl {
    std::shared_ptr<const LoadedModel> model;
    ServiceOptions options;
    std::unique_ptr<JobStore> jobs;
    httplib::Server server;

    static void send_json(httplib::Response& res, int status, const json& body) {
        res.status = status;
        res.set_content(body.dump(), "application/json");
    }

    void routes() {
        server.set_payload_max_length(std::max<std::size_t>(options.max_body_bytes * 8, 64 * 1024 * 1024));
        server.set_tcp_nodelay(true);
        server.set_post_routing_handler([](const httplib::Request&, httplib::Response& res) {
            res.set_header("Access-Control-Allow-Origin", "*");
            res.set_header("Access-Control-Allow-Methods", "GET, POST, OPTIONS");
            res.set_header("Access-Control-Allow-Headers", "Content-Type");
        });
        server.Options(R"(/.*)", [](const httplib::Request&, httplib::Response& res) { res.status = 204; });

        server.Post("/api/v1/generate", [this](const httplib::Request& req, httplib::Response& res) {
            if (!model) return send_json(res, 503, {{"error", "no model loaded"}});
            if (req.body.size() > options.max_body_bytes) {
                return send_json(res, 400, {{"error", "payload exceeds " + std::to_string(options.max_body_bytes) + " bytes"},
                                            {"field", nullptr}});
            }
            json body;
            try {
                body = json::parse(req.body);
            } catch (const json::exception& e) {
                return send_json(res, 400, {{"error", std::string("malformed JSON: ") + e.what()}, {"field", nullptr}});
            }
            try {
                const GenerationJob job = prepare_job(GenerateRequest::from_json(body), model->spec);
                const std::string id = jobs->submit(job);
                send_json(res, 202, {{"job_id", id}});
            } catch (const RequestError& e) {
                send_json(res, 400, {{"error", e.what()}, {"field", e.field().empty() ? json(nullptr) : json(e.field())}});
            } catch (const QueueFull& e) {
                send_json(res, 503, {{"error", e.what()}});
            }
        });

        server.Get(R"(/api/v1/jobs/([^/]+))", [this](const httplib::Request& req, httplib::Response& res) {
            if (!jobs) return send_json(res, 404, {{"error", "unknown job"}});
            auto rec = jobs->get(req.matches[1]);
            if (!rec) return send_json(res, 404, {{"error", "unknown job " + std::string(req.matches[1])}});
            send_json(res, 200, rec->to_json());
        });

        server.Get("/api/v1/models", [this](const httplib::Request&, httplib::Response& res) {
            if (!model) return send_json(res, 200, {{"loaded", false}});
            send_json(res, 200,
                      {{"loaded", true},
                       {"height", model->spec.height},
                       {"width", model->spec.width},
                       {"steps", model->spec.T},
                       {"config", model->spec.to_json()}});
        });

        if (options.ui_dir && std::filesystem::is_directory(*options.ui_dir)) {
            server.set_mount_point("/", options.ui_dir->string());
        }
    }
};

InferenceService::InferenceService(std::shared_ptr<const LoadedModel> model, ServiceOptions options)
    : impl_(std::make_unique<Impl>()) {
    impl_->model = std::move(model);
    impl_->options = std::move(options);
    if (impl_->model) impl_->jobs = std::make_unique<JobStore>(impl_->model, impl_->options.jobs);
    impl_->routes();
}

InferenceService::~InferenceService() { stop(); }

int InferenceService::bind(const std::string& host, int port) {
    if (port == 0) {
        const int p = impl_->server.bind_to_any_port(host);
        if (p < 0) throw std::runtime_error("cannot bind " + host);
        return p;
    }
    if (!impl_->server.bind_to_port(host, port)) {
        throw std::runtime_error("cannot bind " + host + ":" + std::to_string(port));
    }
    return port;
}

void InferenceService::listen() { impl_->server.listen_after_bind(); }

void InferenceService::stop() {
    if (impl_->server.is_running()) impl_->server.stop();
}

JobStore* InferenceService::jobs() noexcept { return impl_->jobs.get(); }

}  // namespace sketchdiff
