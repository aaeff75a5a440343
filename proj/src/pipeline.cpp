#include "mdnik/pipeline.hpp"

#include <charconv>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <sstream>

namespace mdnik {

namespace {

std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r\n");
    if (b == std::string::npos) return {};
    const auto e = s.find_last_not_of(" \t\r\n");
    return s.substr(b, e - b + 1);
}

std::string strip_comment(const std::string& s) {
    const auto p = s.find('#');
    return p == std::string::npos ? s : s.substr(0, p);
}

double to_double(const std::string& tok, const std::string& what, int line) {
    double v = 0.0;
    auto res = std::from_chars(tok.data(), tok.data() + tok.size(), v);
    if (res.ec != std::errc() || res.ptr != tok.data() + tok.size() || !std::isfinite(v))
        throw ParseError(what + ": bad number '" + tok + "'", line);
    return v;
}

std::string read_file(const std::string& path, const std::string& what) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ValidationError("cannot open " + what + " '" + path + "'");
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

}  // namespace

// ---------------------------------------------------------------------------
// Calibration

void CalibrationMap::validate() const {
    for (std::size_t i = 0; i < joints.size(); ++i) {
        const auto& j = joints[i];
        if (j.sign != 1 && j.sign != -1) throw ValidationError("calibration joint " + std::to_string(i) + ": sign must be +1 or -1");
        if (!(j.min_deg < j.max_deg)) throw ValidationError("calibration joint " + std::to_string(i) + ": min_deg must be below max_deg");
        if (!std::isfinite(j.offset_deg)) throw ValidationError("calibration joint " + std::to_string(i) + ": offset must be finite");
    }
}

CalibrationMap parse_calibration(const std::string& text) {
    CalibrationMap map;
    std::istringstream in(text);
    std::string raw;
    int lineno = 0;
    while (std::getline(in, raw)) {
        ++lineno;
        const std::string line = trim(strip_comment(raw));
        if (line.empty()) continue;
        std::istringstream fields(line);
        std::vector<std::string> tok;
        for (std::string t; fields >> t;) tok.push_back(t);
        if (tok.size() != 4) throw ParseError("calibration: expected 'sign offset_deg min_deg max_deg'", lineno);
        JointCalibration j;
        const double sign = to_double(tok[0], "calibration sign", lineno);
        if (sign != 1.0 && sign != -1.0) throw ParseError("calibration: sign must be 1 or -1", lineno);
        j.sign = static_cast<int>(sign);
        j.offset_deg = to_double(tok[1], "calibration offset", lineno);
        j.min_deg = to_double(tok[2], "calibration min", lineno);
        j.max_deg = to_double(tok[3], "calibration max", lineno);
        if (!(j.min_deg < j.max_deg)) throw ParseError("calibration: min_deg must be below max_deg", lineno);
        map.joints.push_back(j);
    }
    map.validate();
    return map;
}

CalibrationMap load_calibration(const std::string& path) { return parse_calibration(read_file(path, "calibration file")); }

SerialCommand apply_calibration(const CalibrationMap& map, const JointConfig& q) {
    if (static_cast<std::size_t>(q.size()) != map.size())
        throw DimensionError("configuration has " + std::to_string(q.size()) + " joints, calibration has " +
                             std::to_string(map.size()));
    SerialCommand cmd;
    for (std::size_t i = 0; i < map.size(); ++i) {
        const auto& j = map.joints[i];
        const double deg = j.sign * q[static_cast<Eigen::Index>(i)] * (180.0 / std::numbers::pi) + j.offset_deg;
        if (!std::isfinite(deg)) throw RangeError("joint " + std::to_string(i) + ": non-finite command", i);
        const double rounded = std::round(deg);
        if (rounded < j.min_deg || rounded > j.max_deg)
            throw RangeError("joint " + std::to_string(i) + ": command " + format_double(rounded) + " deg outside [" +
                                 format_double(j.min_deg) + ", " + format_double(j.max_deg) + "]",
                             i);
        cmd.joint_degrees.push_back(static_cast<int>(rounded));
    }
    cmd.line = render_command(cmd.joint_degrees);
    return cmd;
}

JointConfig invert_calibration(const CalibrationMap& map, const std::vector<int>& degrees) {
    if (degrees.size() != map.size()) throw DimensionError("command width does not match calibration");
    JointConfig q(static_cast<Eigen::Index>(map.size()));
    for (std::size_t i = 0; i < map.size(); ++i) {
        const auto& j = map.joints[i];
        q[static_cast<Eigen::Index>(i)] = j.sign * (degrees[i] - j.offset_deg) * (std::numbers::pi / 180.0);
    }
    return q;
}

std::string render_command(const std::vector<int>& degrees) {
    std::string line = "J";
    for (int d : degrees) line += " " + std::to_string(d);
    line += "\n";
    return line;
}

std::vector<int> parse_command(const std::string& line) {
    if (line.empty() || line[0] != 'J') throw ParseError("command must start with 'J'");
    std::vector<int> out;
    std::size_t pos = 1;
    while (pos < line.size()) {
        if (line[pos] != ' ') throw ParseError("expected a single space before each value");
        ++pos;
        const char* begin = line.data() + pos;
        const char* end = line.data() + line.size();
        if (begin == end || (*begin != '-' && !std::isdigit(static_cast<unsigned char>(*begin))))
            throw ParseError("expected an integer");
        int v = 0;
        auto res = std::from_chars(begin, end, v);
        if (res.ec != std::errc()) throw ParseError("expected an integer");
        out.push_back(v);
        pos = static_cast<std::size_t>(res.ptr - line.data());
    }
    return out;
}

void StreamSink::write(const SerialCommand& command) {
    out_ << command.line;
    out_.flush();
}

struct FileSink::Impl {
    std::ofstream out;
};

FileSink::FileSink(const std::string& path) : impl_(std::make_unique<Impl>()) {
    impl_->out.open(path, std::ios::binary | std::ios::trunc);
    if (!impl_->out) throw ValidationError("cannot open command sink '" + path + "'");
}

FileSink::~FileSink() = default;

void FileSink::write(const SerialCommand& command) {
    impl_->out << command.line;
    impl_->out.flush();
    if (!impl_->out) throw Error("write to command sink failed");
}

// ---------------------------------------------------------------------------
// Pipeline

std::size_t select_largest(const std::vector<Blob>& blobs) {
    if (blobs.empty()) throw ValidationError("no blobs to select from");
    return 0;
}

namespace {

template <typename F>
auto timed_stage(const char* name, std::vector<StageTiming>& timings, F&& body) {
    const auto start = std::chrono::steady_clock::now();
    try {
        auto value = body();
        timings.push_back({name, std::chrono::duration<double, std::micro>(std::chrono::steady_clock::now() - start).count()});
        return value;
    } catch (const StageError&) {
        throw;
    } catch (const ValidationError& e) {
        throw StageError(name, e.what(), true);
    } catch (const std::exception& e) {
        throw StageError(name, e.what(), false);
    }
}

}  // namespace

PipelineRunReport run_pipeline(const Image& image, const PipelineContext& ctx, CommandSink& sink) {
    PipelineRunReport r;
    r.seed = ctx.seed;
    auto& t = r.stage_timings;

    timed_stage("validate", t, [&] {
        if (static_cast<std::size_t>(ctx.model.dof()) != ctx.chain.dof())
            throw DimensionError("model dof " + std::to_string(ctx.model.dof()) + " does not match chain dof " +
                                 std::to_string(ctx.chain.dof()));
        if (ctx.calibration.size() != ctx.chain.dof())
            throw DimensionError("calibration has " + std::to_string(ctx.calibration.size()) +
                                 " joints, chain dof is " + std::to_string(ctx.chain.dof()));
        return 0;
    });
    const SegMask mask = timed_stage("segment", t, [&] { return ctx.segmenter.segment(image); });
    const auto blobs = timed_stage("blobs", t, [&] { return find_blobs(mask, ctx.min_area); });
    r.detected_blobs = blobs.size();
    if (blobs.empty()) {
        r.outcome = PipelineOutcome::no_colonies;
        return r;
    }
    const Blob chosen = timed_stage("select", t, [&] {
        const std::size_t i = ctx.selector(blobs);
        if (i >= blobs.size()) throw ValidationError("target selector returned an invalid index");
        return blobs[i];
    });
    r.chosen_blob = chosen;
    r.chosen_target_world = timed_stage("project", t, [&] {
        Eigen::Vector3d w = pixel_to_world(ctx.camera, chosen.centroid, ctx.plane_z);
        w.z() += ctx.hover_offset;
        return w;
    });
    r.predicted_config = timed_stage("ik", t, [&] { return predict_config(ctx.model, r.chosen_target_world); });
    r.predicted_position = timed_stage("verify", t, [&] {
        return Eigen::Vector3d(forward_kinematics(ctx.chain, r.predicted_config).translation);
    });
    const SerialCommand cmd = timed_stage("calibrate", t, [&] {
        // Means can fall marginally outside the limits they were trained on.
        return apply_calibration(ctx.calibration, ctx.chain.clamp(r.predicted_config));
    });
    r.commanded_degrees = cmd.joint_degrees;
    timed_stage("emit", t, [&] {
        sink.write(cmd);
        return 0;
    });
    r.achieved_position = timed_stage("achieved", t, [&] {
        const JointConfig q = invert_calibration(ctx.calibration, cmd.joint_degrees);
        return Eigen::Vector3d(forward_kinematics(ctx.chain, q).translation);
    });
    r.position_error_mm = (r.achieved_position - r.chosen_target_world).norm() * 1000.0;
    r.outcome = PipelineOutcome::commanded;
    return r;
}

namespace {

std::string vec_text(const Eigen::VectorXd& v, const char* sep = " ") {
    std::string s;
    for (Eigen::Index i = 0; i < v.size(); ++i) {
        if (i) s += sep;
        s += format_double(v[i]);
    }
    return s;
}

}  // namespace

std::string render_report_text(const PipelineRunReport& r, bool include_timings) {
    std::ostringstream os;
    os << "seed: " << r.seed << "\n";
    os << "detected_blobs: " << r.detected_blobs << "\n";
    if (r.outcome == PipelineOutcome::no_colonies) {
        os << "outcome: no colonies detected\n";
    } else {
        const Blob& b = *r.chosen_blob;
        os << "outcome: commanded\n";
        os << "chosen_blob: pixels=" << b.pixel_count << " centroid=" << format_double(b.centroid.x()) << ","
           << format_double(b.centroid.y()) << " box=" << b.box.x0 << "," << b.box.y0 << "," << b.box.x1 << ","
           << b.box.y1 << "\n";
        os << "target_world_m: " << vec_text(r.chosen_target_world) << "\n";
        os << "predicted_config_rad: " << vec_text(r.predicted_config) << "\n";
        os << "predicted_position_m: " << vec_text(r.predicted_position) << "\n";
        os << "commanded_deg:";
        for (int d : r.commanded_degrees) os << " " << d;
        os << "\n";
        os << "achieved_position_m: " << vec_text(r.achieved_position) << "\n";
        os << "position_error_mm: " << format_double(r.position_error_mm) << "\n";
    }
    if (include_timings) {
        for (const auto& st : r.stage_timings) os << "time_us." << st.stage << ": " << st.micros << "\n";
    }
    return os.str();
}

std::string report_csv_header(std::size_t dof) {
    std::string h = "outcome,detected_blobs,target_x,target_y,target_z";
    for (std::size_t i = 0; i < dof; ++i) h += ",q" + std::to_string(i);
    for (std::size_t i = 0; i < dof; ++i) h += ",cmd" + std::to_string(i);
    h += ",achieved_x,achieved_y,achieved_z,position_error_mm\n";
    return h;
}

std::string report_csv_row(const PipelineRunReport& r, std::size_t dof) {
    std::string row = r.outcome == PipelineOutcome::commanded ? "commanded" : "no_colonies";
    row += "," + std::to_string(r.detected_blobs);
    const bool ok = r.outcome == PipelineOutcome::commanded;
    auto num = [&](double v) { return ok ? format_double(v) : std::string(); };
    for (int i = 0; i < 3; ++i) row += "," + num(r.chosen_target_world[i]);
    for (std::size_t i = 0; i < dof; ++i) row += "," + (ok ? format_double(r.predicted_config[static_cast<Eigen::Index>(i)]) : "");
    for (std::size_t i = 0; i < dof; ++i) row += "," + (ok ? std::to_string(r.commanded_degrees[i]) : "");
    for (int i = 0; i < 3; ++i) row += "," + num(r.achieved_position[i]);
    row += "," + num(r.position_error_mm) + "\n";
    return row;
}

std::vector<TracePoint> replay_serial(const std::string& script, const KinematicChain& chain,
                                      const CalibrationMap& calibration) {
    if (calibration.size() != chain.dof()) throw DimensionError("calibration width does not match chain dof");
    std::vector<TracePoint> trace;
    std::istringstream in(script);
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (trim(line).empty()) continue;
        std::vector<int> degrees;
        try {
            degrees = parse_command(line);
        } catch (const ParseError& e) {
            throw ParseError(std::string("serial script: ") + e.what(), lineno);
        }
        if (degrees.size() != chain.dof())
            throw ParseError("serial script: expected " + std::to_string(chain.dof()) + " values, got " +
                                 std::to_string(degrees.size()),
                             lineno);
        TracePoint p;
        p.line = lineno;
        p.q = invert_calibration(calibration, degrees);
        p.position = forward_kinematics(chain, p.q).translation;
        trace.push_back(std::move(p));
    }
    return trace;
}

// ---------------------------------------------------------------------------
// Run configuration

RunConfig parse_run_config(const std::string& text, const std::string& base_dir) {
    namespace fs = std::filesystem;
    RunConfig c;
    auto path_of = [&](const std::string& v) {
        if (v == "-" || v.empty()) return v;
        const fs::path p(v);
        return p.is_absolute() ? v : (fs::path(base_dir) / p).lexically_normal().string();
    };
    bool have_image = false, have_model = false, have_chain = false, have_cal = false;
    Eigen::Vector3d xyz = Eigen::Vector3d::Zero(), rpy = Eigen::Vector3d::Zero();
    std::istringstream in(text);
    std::string raw;
    int lineno = 0;
    while (std::getline(in, raw)) {
        ++lineno;
        const std::string line = trim(strip_comment(raw));
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos) throw ParseError("run config: expected 'key = value'", lineno);
        const std::string key = trim(line.substr(0, eq));
        const std::string value = trim(line.substr(eq + 1));
        auto vec3 = [&] {
            std::istringstream vs(value);
            Eigen::Vector3d v;
            std::string tok;
            for (int i = 0; i < 3; ++i) {
                if (!(vs >> tok)) throw ParseError("run config: " + key + " needs three numbers", lineno);
                v[i] = to_double(tok, key, lineno);
            }
            if (vs >> tok) throw ParseError("run config: " + key + " needs three numbers", lineno);
            return v;
        };
        if (key == "chain") { c.chain_path = path_of(value); have_chain = true; }
        else if (key == "tip_link") c.tip_link = value;
        else if (key == "masked") {
            std::istringstream vs(value);
            for (std::string name; std::getline(vs, name, ',');)
                if (!trim(name).empty()) c.masked_joints.push_back(trim(name));
        }
        else if (key == "model") { c.model_path = path_of(value); have_model = true; }
        else if (key == "calibration") { c.calibration_path = path_of(value); have_cal = true; }
        else if (key == "image") { c.image_path = path_of(value); have_image = true; }
        else if (key == "mask") c.mask_path = path_of(value);
        else if (key == "commands") c.commands_path = path_of(value);
        else if (key == "report") c.report_path = path_of(value);
        else if (key == "overlay") c.overlay_path = path_of(value);
        else if (key == "fx") c.camera.fx = to_double(value, key, lineno);
        else if (key == "fy") c.camera.fy = to_double(value, key, lineno);
        else if (key == "cx") c.camera.cx = to_double(value, key, lineno);
        else if (key == "cy") c.camera.cy = to_double(value, key, lineno);
        else if (key == "camera_xyz") xyz = vec3();
        else if (key == "camera_rpy") rpy = vec3();
        else if (key == "plane_z") c.plane_z = to_double(value, key, lineno);
        else if (key == "hover_offset") c.hover_offset = to_double(value, key, lineno);
        else if (key == "min_area") {
            const double v = to_double(value, key, lineno);
            if (v < 1 || v != std::floor(v)) throw ParseError("run config: min_area must be a positive integer", lineno);
            c.min_area = static_cast<std::size_t>(v);
        }
        else if (key == "threshold") {
            if (value == "otsu") c.threshold.threshold.reset();
            else {
                const double v = to_double(value, key, lineno);
                if (v < 0 || v > 256 || v != std::floor(v)) throw ParseError("run config: threshold must be 0..256 or 'otsu'", lineno);
                c.threshold.threshold = static_cast<int>(v);
            }
        }
        else if (key == "polarity") {
            if (value == "bright") c.threshold.polarity = Polarity::bright;
            else if (value == "dark") c.threshold.polarity = Polarity::dark;
            else throw ParseError("run config: polarity must be bright or dark", lineno);
        }
        else if (key == "seed") {
            std::uint64_t s = 0;
            auto res = std::from_chars(value.data(), value.data() + value.size(), s);
            if (res.ec != std::errc() || res.ptr != value.data() + value.size()) throw ParseError("run config: bad seed", lineno);
            c.seed = s;
        }
        else throw ParseError("run config: unknown key '" + key + "'", lineno);
    }
    if (!have_chain || !have_model || !have_cal || !have_image)
        throw ValidationError("run config: chain, model, calibration and image are required");
    c.camera.pose = RigidTransform::from_xyz_rpy(xyz, rpy);
    c.camera.validate();
    return c;
}

RunConfig load_run_config(const std::string& path) {
    const std::string dir = std::filesystem::path(path).parent_path().string();
    return parse_run_config(read_file(path, "run config"), dir.empty() ? "." : dir);
}

LoadedRun load_run_inputs(const RunConfig& c) {
    std::vector<StageTiming> ignored;
    LoadedRun run;
    run.chain = timed_stage("load-chain", ignored, [&] {
        return load_chain(c.chain_path, ChainOptions{"", c.tip_link, c.masked_joints});
    });
    run.model = timed_stage("load-model", ignored, [&] { return load_model(c.model_path, run.chain.dof()); });
    run.calibration = timed_stage("load-calibration", ignored, [&] {
        CalibrationMap m = load_calibration(c.calibration_path);
        if (m.size() != run.chain.dof())
            throw DimensionError("calibration has " + std::to_string(m.size()) + " joints, chain dof is " +
                                 std::to_string(run.chain.dof()));
        return m;
    });
    run.image = timed_stage("load-image", ignored, [&] { return read_pnm(c.image_path); });
    if (!c.mask_path.empty()) {
        run.segmenter = timed_stage("load-mask", ignored, [&] {
            return std::unique_ptr<Segmenter>(std::make_unique<ExternalMaskSegmenter>(mask_from_image(read_pnm(c.mask_path))));
        });
    } else {
        run.segmenter = std::make_unique<ThresholdSegmenter>(c.threshold);
    }
    return run;
}

PipelineRunReport run_from_config(const RunConfig& c, const LoadedRun& in, CommandSink& sink) {
    PipelineContext ctx{*in.segmenter, in.chain, in.model, in.calibration, c.camera, c.plane_z, c.hover_offset,
                        c.min_area, c.seed, select_largest};
    return run_pipeline(in.image, ctx, sink);
}

}  // namespace mdnik
