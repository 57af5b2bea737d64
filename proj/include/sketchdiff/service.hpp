#pragma once

#include <chrono>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "sketchdiff/checkpoint.hpp"
#include "sketchdiff/diffusion.hpp"
#include "sketchdiff/network.hpp"

namespace sketchdiff {

std::string base64_encode(std::span<const std::uint8_t> bytes);
/// Accepts an optional "data:...;base64," prefix. Throws std::invalid_argument.
std::vector<std::uint8_t> base64_decode(std::string_view text);

/// A denoiser plus the schedule and resolution it was trained for.
struct LoadedModel {
    ModelSpec spec;
    NoiseSchedule schedule;
    std::shared_ptr<const UNet> net;
    std::shared_ptr<const ParameterSet> params;
    std::shared_ptr<const Denoiser> denoiser;

    /// Uses the EMA weights when present unless `raw_params` is set.
    static std::shared_ptr<const LoadedModel> from_checkpoint(const std::filesystem::path& path,
                                                              bool raw_params = false);
    static std::shared_ptr<const LoadedModel> from_denoiser(ModelSpec spec,
                                                            std::shared_ptr<const Denoiser> denoiser);
};

/// Validation failure tied to one request field.
class RequestError : public std::invalid_argument {
public:
    RequestError(std::string field, const std::string& message)
        : std::invalid_argument(message), field_(std::move(field)) {}
    const std::string& field() const noexcept { return field_; }

private:
    std::string field_;
};

struct GenerateRequest {
    std::optional<std::string> sketch_png;
    std::optional<std::string> stroke_png;
    std::optional<std::string> reference_png;
    double s_sketch = 1.0;
    double s_stroke = 1.0;
    double realism = 0.0;
    std::optional<std::uint64_t> seed;
    std::optional<int> steps;

    /// Type-checks fields; throws RequestError naming the offending field.
    static GenerateRequest from_json(const nlohmann::json& j);
    nlohmann::json to_json() const;
};

/// Decoded conditions and settings, ready for sampling.
struct GenerationJob {
    ConditionPair cond;
    ControlSettings settings;
    std::uint64_t seed = 0;
    int steps = 0;  // 0 = the model's full schedule
};

/// Decodes PNGs and validates values and sizes against the model. When
/// realism > 0 and no reference is given, the stroke image is the reference.
GenerationJob prepare_job(const GenerateRequest& req, const ModelSpec& spec);

/// Runs the sampler for a prepared job; deterministic in (model, job).
ImageBuffer generate(const LoadedModel& model, const GenerationJob& job, const ProgressFn& progress = {});

enum class JobStatus { queued, running, done, failed };
std::string to_string(JobStatus s);

struct JobRecord {
    using Clock = std::chrono::system_clock;

    std::string job_id;
    JobStatus status = JobStatus::queued;
    double progress = 0.0;
    std::optional<std::string> result_png;  // base64
    std::optional<std::string> error;
    Clock::time_point created_at;
    std::optional<Clock::time_point> finished_at;

    nlohmann::json to_json() const;
};

struct JobStoreOptions {
    int workers = 1;
    std::chrono::seconds retention{600};
    std::size_t max_finished = 512;  // oldest finished jobs beyond this are evicted
    std::size_t max_queued = 1024;
};

class QueueFull : public std::runtime_error {
public:
    QueueFull() : std::runtime_error("job queue is full") {}
};

/// FIFO job queue drained by a fixed pool of sampling workers.
///
/// Finished jobs are kept for at least `retention` unless more than
/// `max_finished` accumulate, in which case the oldest are dropped first.
class JobStore {
public:
    JobStore(std::shared_ptr<const LoadedModel> model, JobStoreOptions options = {});
    ~JobStore();
    JobStore(const JobStore&) = delete;
    JobStore& operator=(const JobStore&) = delete;

    std::string submit(GenerationJob job);
    std::optional<JobRecord> get(const std::string& id) const;
    std::size_t size() const;
    /// Blocks until the job is done or failed, or the timeout passes.
    std::optional<JobRecord> wait(const std::string& id, std::chrono::milliseconds timeout) const;

private:
    struct Impl;
    std::unique_ptr<Impl> impl_;
};

struct ServiceOptions {
    JobStoreOptions jobs;
    std::optional<std::filesystem::path> ui_dir;
    std::size_t max_body_bytes = 8 * 1024 * 1024;
};

/// HTTP front end:
///   POST /api/v1/generate   -> 202 {"job_id"} | 400 {"error","field"} | 503
///   GET  /api/v1/jobs/{id}  -> 200 JobRecord | 404
///   GET  /api/v1/models     -> 200 {"loaded","height","width","steps"}
/// plus CORS headers on every response and static files at "/".
class InferenceService {
public:
    InferenceService(std::shared_ptr<const LoadedModel> model, ServiceOptions options = {});
    ~InferenceService();

    /// Binds to host:port (port 0 picks a free port) and returns the port.
    int bind(const std::string& host, int port);
    /// Serves until stop() is called.
    void listen();
    void stop();

    JobStore* jobs() noexcept;

private:
    struct Impl;
    std::unique_ptr<Impl> impl_;
};

}  // namespace sketchdiff
