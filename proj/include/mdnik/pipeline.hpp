#pragma once

#include <Eigen/Dense>

#include <functional>
#include <iosfwd>
#include <memory>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "mdnik/errors.hpp"
#include "mdnik/kinematics.hpp"
#include "mdnik/mdn.hpp"
#include "mdnik/vision.hpp"

namespace mdnik {

// ---------------------------------------------------------------------------
// Calibration between model joint space (radians) and servo degrees.

struct JointCalibration {
    int sign = 1;  // +1 or -1
    double offset_deg = 0.0;
    double min_deg = 0.0;
    double max_deg = 180.0;
};

struct CalibrationMap {
    std::vector<JointCalibration> joints;

    std::size_t size() const { return joints.size(); }
    void validate() const;
};

// One line per joint: "sign offset_deg min_deg max_deg"; '#' starts a comment.
CalibrationMap parse_calibration(const std::string& text);
CalibrationMap load_calibration(const std::string& path);

struct SerialCommand {
    std::vector<int> joint_degrees;
    std::string line;  // "J d0 d1 ...\n"
};

// deg = sign * q * 180/pi + offset, rounded half away from zero, then checked
// against [min_deg, max_deg]. Throws RangeError naming the joint.
SerialCommand apply_calibration(const CalibrationMap& map, const JointConfig& q);
// Exact inverse of the affine part: q = sign * (deg - offset) * pi/180.
JointConfig invert_calibration(const CalibrationMap& map, const std::vector<int>& degrees);

std::string render_command(const std::vector<int>& degrees);
// Parses one line without its trailing newline.
std::vector<int> parse_command(const std::string& line);

class CommandSink {
  public:
    virtual ~CommandSink() = default;
    virtual void write(const SerialCommand& command) = 0;
};

// Standard output or any already-open stream.
class StreamSink : public CommandSink {
  public:
    explicit StreamSink(std::ostream& out) : out_(out) {}
    void write(const SerialCommand& command) override;

  private:
    std::ostream& out_;
};

// Regular file or a serial device node; truncated on open.
class FileSink : public CommandSink {
  public:
    explicit FileSink(const std::string& path);
    ~FileSink() override;
    void write(const SerialCommand& command) override;

  private:
    struct Impl;
    std::unique_ptr<Impl> impl_;
};

class MemorySink : public CommandSink {
  public:
    void write(const SerialCommand& command) override { lines.push_back(command.line); }
    std::vector<std::string> lines;
};

// ---------------------------------------------------------------------------
// Pipeline

// Error raised inside a pipeline stage, tagged with the stage name.
class StageError : public Error {
  public:
    StageError(std::string stage, const std::string& what, bool validation)
        : Error(stage + ": " + what), stage_(std::move(stage)), validation_(validation) {}
    const std::string& stage() const noexcept { return stage_; }
    // True when the underlying cause was bad input rather than a runtime failure.
    bool validation() const noexcept { return validation_; }

  private:
    std::string stage_;
    bool validation_;
};

// Picks one blob out of a non-empty list.
using TargetSelector = std::function<std::size_t(const std::vector<Blob>&)>;

// Largest blob; find_blobs already orders ties.
std::size_t select_largest(const std::vector<Blob>& blobs);

struct PipelineContext {
    const Segmenter& segmenter;
    const KinematicChain& chain;
    const MdnModel& model;
    const CalibrationMap& calibration;
    CameraModel camera;
    double plane_z = 0.0;
    double hover_offset = 0.0;  // added to the world target's z
    std::size_t min_area = 1;
    std::uint64_t seed = 0;
    TargetSelector selector = select_largest;
};

enum class PipelineOutcome { no_colonies, commanded };

struct StageTiming {
    std::string stage;
    double micros = 0.0;
};

struct PipelineRunReport {
    PipelineOutcome outcome = PipelineOutcome::no_colonies;
    std::uint64_t seed = 0;
    std::size_t detected_blobs = 0;
    std::optional<Blob> chosen_blob;
    Eigen::Vector3d chosen_target_world = Eigen::Vector3d::Zero();
    JointConfig predicted_config;
    Eigen::Vector3d predicted_position = Eigen::Vector3d::Zero();  // FK of the unquantized prediction
    std::vector<int> commanded_degrees;
    Eigen::Vector3d achieved_position = Eigen::Vector3d::Zero();  // FK of the commanded pose
    double position_error_mm = 0.0;
    std::vector<StageTiming> stage_timings;
};

// Segment -> blobs -> select -> back-project -> predict -> calibrate -> emit.
// With no blobs the report says so and nothing is written to the sink.
PipelineRunReport run_pipeline(const Image& image, const PipelineContext& context, CommandSink& sink);

// Deterministic text; timings are appended only when asked for.
std::string render_report_text(const PipelineRunReport& report, bool include_timings = false);
std::string report_csv_header(std::size_t dof);
std::string report_csv_row(const PipelineRunReport& report, std::size_t dof);

struct TracePoint {
    int line = 0;
    JointConfig q;
    Eigen::Vector3d position = Eigen::Vector3d::Zero();
};

// Inverse-calibrates every command line and runs FK on it. Blank lines are
// skipped; anything else must match the wire grammar.
std::vector<TracePoint> replay_serial(const std::string& script, const KinematicChain& chain,
                                      const CalibrationMap& calibration);

// ---------------------------------------------------------------------------
// Run configuration ("key = value" per line, '#' comments). Relative paths are
// resolved against the configuration file's directory.

struct RunConfig {
    std::string chain_path;
    std::string tip_link;
    std::vector<std::string> masked_joints;
    std::string model_path;
    std::string calibration_path;
    std::string image_path;
    std::string mask_path;      // optional external mask instead of thresholding
    std::string commands_path;  // "-" for standard output
    std::string report_path;    // optional
    std::string overlay_path;   // optional
    CameraModel camera;
    double plane_z = 0.0;
    double hover_offset = 0.0;
    std::size_t min_area = 20;
    ThresholdSettings threshold;
    std::uint64_t seed = 0;
};

RunConfig parse_run_config(const std::string& text, const std::string& base_dir = ".");
RunConfig load_run_config(const std::string& path);

struct LoadedRun {
    KinematicChain chain;
    MdnModel model;
    CalibrationMap calibration;
    Image image;
    std::unique_ptr<Segmenter> segmenter;
};

// Loads every input named by the configuration; failures are StageErrors
// tagged load-chain, load-model, load-calibration, load-image or load-mask.
LoadedRun load_run_inputs(const RunConfig& config);

PipelineRunReport run_from_config(const RunConfig& config, const LoadedRun& inputs, CommandSink& sink);

}  // namespace mdnik
