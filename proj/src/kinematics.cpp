#include "mdnik/kinematics.hpp"

#include <expat.h>

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <map>
#include <memory>
#include <numbers>
#include <optional>
#include <set>
#include <sstream>

#include "mdnik/errors.hpp"

namespace mdnik {

RigidTransform RigidTransform::from_xyz_rpy(const Eigen::Vector3d& xyz, const Eigen::Vector3d& rpy) {
    RigidTransform t;
    t.rotation = (Eigen::AngleAxisd(rpy.z(), Eigen::Vector3d::UnitZ()) *
                  Eigen::AngleAxisd(rpy.y(), Eigen::Vector3d::UnitY()) *
                  Eigen::AngleAxisd(rpy.x(), Eigen::Vector3d::UnitX()))
                     .toRotationMatrix();
    t.translation = xyz;
    return t;
}

std::string_view to_string(JointKind kind) {
    switch (kind) {
        case JointKind::revolute: return "revolute";
        case JointKind::prismatic: return "prismatic";
        case JointKind::fixed: return "fixed";
    }
    return "fixed";
}

std::string format_double(double v) {
    char buf[32];
    auto res = std::to_chars(buf, buf + sizeof buf, v, std::chars_format::general, 17);
    return std::string(buf, res.ptr);
}

namespace {

std::uint64_t fnv1a(std::string_view s) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

std::string vec_text(const Eigen::Vector3d& v) {
    return format_double(v.x()) + " " + format_double(v.y()) + " " + format_double(v.z());
}

// Shortest text that reads back to the same double; for human-facing output.
std::string short_text(double v) {
    char buf[32];
    auto res = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, res.ptr);
}

std::string vec_short(const Eigen::Vector3d& v) {
    return short_text(v.x()) + " " + short_text(v.y()) + " " + short_text(v.z());
}

std::string canonical_text(const std::string& robot, const std::string& base, const std::string& tip,
                           const std::vector<Joint>& joints) {
    std::ostringstream os;
    os << "robot " << robot << "\nbase " << base << "\ntip " << tip << "\n";
    for (const auto& j : joints) {
        os << "joint " << j.name << ' ' << to_string(j.kind) << ' ' << j.parent_link << ' ' << j.child_link
           << " xyz " << vec_text(j.origin_xyz) << " rpy " << vec_text(j.origin_rpy) << " axis "
           << vec_text(j.axis_declared);
        if (j.limits) os << " limit " << format_double(j.limits->lower) << ' ' << format_double(j.limits->upper);
        os << " masked " << (j.masked ? 1 : 0) << '\n';
    }
    return os.str();
}

}  // namespace

KinematicChain::KinematicChain(std::string robot_name, std::string base_link, std::string tip_link,
                               std::vector<Joint> joints)
    : robot_name_(std::move(robot_name)),
      base_link_(std::move(base_link)),
      tip_link_(std::move(tip_link)),
      joints_(std::move(joints)) {
    for (std::size_t i = 0; i < joints_.size(); ++i) {
        const Joint& j = joints_[i];
        if (j.active()) {
            if (!j.limits) throw ValidationError("joint '" + j.name + "' has no limits");
            active_.push_back(i);
        }
        if (j.limits && !(j.limits->lower <= j.limits->upper))
            throw ValidationError("joint '" + j.name + "' has lower limit above upper limit");
    }
    char hex[17];
    std::snprintf(hex, sizeof hex, "%016llx",
                  static_cast<unsigned long long>(fnv1a(canonical_text(robot_name_, base_link_, tip_link_, joints_))));
    fingerprint_ = hex;
}

Eigen::VectorXd KinematicChain::lower_limits() const {
    Eigen::VectorXd v(dof());
    for (std::size_t i = 0; i < dof(); ++i) v[i] = active(i).limits->lower;
    return v;
}

Eigen::VectorXd KinematicChain::upper_limits() const {
    Eigen::VectorXd v(dof());
    for (std::size_t i = 0; i < dof(); ++i) v[i] = active(i).limits->upper;
    return v;
}

JointConfig KinematicChain::mid_config() const { return 0.5 * (lower_limits() + upper_limits()); }

JointConfig KinematicChain::clamp(const JointConfig& q) const {
    if (static_cast<std::size_t>(q.size()) != dof()) throw DimensionError("configuration length does not match dof");
    return q.cwiseMax(lower_limits()).cwiseMin(upper_limits());
}

double KinematicChain::reach() const {
    if (active_.empty()) return 0.0;
    double r = 0.0;
    for (std::size_t i = active_.front(); i < joints_.size(); ++i) {
        const Joint& j = joints_[i];
        if (i != active_.front()) r += j.origin.translation.norm();
        if (j.active() && j.kind == JointKind::prismatic)
            r += std::max(std::abs(j.limits->lower), std::abs(j.limits->upper));
    }
    return r;
}

Eigen::Vector3d KinematicChain::reach_center() const {
    RigidTransform t;
    for (std::size_t i = 0; i < joints_.size(); ++i) {
        t = t * joints_[i].origin;
        if (!active_.empty() && i == active_.front()) break;
    }
    return t.translation;
}

// ---------------------------------------------------------------------------
// URDF subset parsing

namespace {

Eigen::Vector3d parse_vec3(const std::string& text, const std::string& what) {
    Eigen::Vector3d v;
    std::istringstream is(text);
    for (int i = 0; i < 3; ++i) {
        std::string tok;
        if (!(is >> tok)) throw ValidationError(what + ": expected three numbers, got '" + text + "'");
        double d = 0.0;
        auto res = std::from_chars(tok.data(), tok.data() + tok.size(), d);
        if (res.ec != std::errc() || res.ptr != tok.data() + tok.size() || !std::isfinite(d))
            throw ValidationError(what + ": bad number '" + tok + "'");
        v[i] = d;
    }
    std::string extra;
    if (is >> extra) throw ValidationError(what + ": trailing data '" + extra + "'");
    return v;
}

double parse_scalar(const std::string& text, const std::string& what) {
    std::string tok = text;
    while (!tok.empty() && std::isspace(static_cast<unsigned char>(tok.back()))) tok.pop_back();
    std::size_t start = tok.find_first_not_of(" \t\r\n");
    if (start == std::string::npos) throw ValidationError(what + ": empty value");
    tok = tok.substr(start);
    double d = 0.0;
    auto res = std::from_chars(tok.data(), tok.data() + tok.size(), d);
    if (res.ec != std::errc() || res.ptr != tok.data() + tok.size() || !std::isfinite(d))
        throw ValidationError(what + ": bad number '" + text + "'");
    return d;
}

// Minimal element tree; text content is not needed by the URDF subset.
struct XmlElement {
    std::string name;
    std::map<std::string, std::string> attrs;
    std::vector<XmlElement> children;

    const XmlElement* child(std::string_view tag) const {
        for (const auto& c : children)
            if (c.name == tag) return &c;
        return nullptr;
    }
};

struct XmlBuilder {
    std::vector<XmlElement> open;
    std::optional<XmlElement> root;
};

void on_start(void* user, const XML_Char* name, const XML_Char** attrs) {
    auto* b = static_cast<XmlBuilder*>(user);
    XmlElement e;
    e.name = name;
    for (int i = 0; attrs[i]; i += 2) e.attrs.emplace(attrs[i], attrs[i + 1]);
    b->open.push_back(std::move(e));
}

void on_end(void* user, const XML_Char*) {
    auto* b = static_cast<XmlBuilder*>(user);
    XmlElement done = std::move(b->open.back());
    b->open.pop_back();
    if (b->open.empty()) b->root = std::move(done);
    else b->open.back().children.push_back(std::move(done));
}

XmlElement parse_xml(std::string_view source) {
    std::unique_ptr<XML_ParserStruct, decltype(&XML_ParserFree)> parser(XML_ParserCreate(nullptr), &XML_ParserFree);
    if (!parser) throw Error("cannot create XML parser");
    XmlBuilder builder;
    XML_SetUserData(parser.get(), &builder);
    XML_SetElementHandler(parser.get(), on_start, on_end);
    if (source.size() > static_cast<std::size_t>(std::numeric_limits<int>::max())) throw ParseError("document too large");
    if (XML_Parse(parser.get(), source.data(), static_cast<int>(source.size()), 1) == XML_STATUS_ERROR) {
        throw ParseError(std::string("malformed XML: ") + XML_ErrorString(XML_GetErrorCode(parser.get())),
                         static_cast<int>(XML_GetCurrentLineNumber(parser.get())));
    }
    if (!builder.root) throw ParseError("empty document");
    return std::move(*builder.root);
}

std::optional<std::string> attr(const XmlElement& node, const char* name) {
    auto it = node.attrs.find(name);
    if (it == node.attrs.end()) return std::nullopt;
    return it->second;
}

std::string required_attr(const XmlElement& node, const char* name, const std::string& ctx) {
    auto v = attr(node, name);
    if (!v) throw ValidationError(ctx + ": missing attribute '" + name + "'");
    return *v;
}

Joint parse_joint(const XmlElement& node, const std::set<std::string>& masked_names) {
    Joint j;
    j.name = required_attr(node, "name", "joint");
    const std::string ctx = "joint '" + j.name + "'";
    const std::string type = required_attr(node, "type", ctx);
    bool continuous = false;
    if (type == "revolute") {
        j.kind = JointKind::revolute;
    } else if (type == "continuous") {
        j.kind = JointKind::revolute;
        continuous = true;
    } else if (type == "prismatic") {
        j.kind = JointKind::prismatic;
    } else if (type == "fixed") {
        j.kind = JointKind::fixed;
    } else {
        throw ValidationError(ctx + ": unsupported joint type '" + type + "'");
    }

    if (auto p = node.child("parent")) j.parent_link = required_attr(*p, "link", ctx + " parent");
    else throw ValidationError(ctx + ": missing <parent>");
    if (auto c = node.child("child")) j.child_link = required_attr(*c, "link", ctx + " child");
    else throw ValidationError(ctx + ": missing <child>");

    if (auto o = node.child("origin")) {
        if (auto xyz = attr(*o, "xyz")) j.origin_xyz = parse_vec3(*xyz, ctx + " origin xyz");
        if (auto rpy = attr(*o, "rpy")) j.origin_rpy = parse_vec3(*rpy, ctx + " origin rpy");
    }
    j.origin = RigidTransform::from_xyz_rpy(j.origin_xyz, j.origin_rpy);

    if (auto a = node.child("axis")) {
        if (auto xyz = attr(*a, "xyz")) j.axis_declared = parse_vec3(*xyz, ctx + " axis");
    }
    const double n = j.axis_declared.norm();
    if (j.kind != JointKind::fixed && !(n > 0.0)) throw ValidationError(ctx + ": zero-length axis");
    j.axis = n > 0.0 ? Eigen::Vector3d(j.axis_declared / n) : Eigen::Vector3d::UnitX();

    if (continuous) {
        j.limits = JointLimits{-std::numbers::pi, std::numbers::pi};
    } else if (auto l = node.child("limit")) {
        auto lo = attr(*l, "lower");
        auto hi = attr(*l, "upper");
        if (lo && hi) {
            j.limits = JointLimits{parse_scalar(*lo, ctx + " lower"), parse_scalar(*hi, ctx + " upper")};
        } else if (j.kind != JointKind::fixed) {
            throw ValidationError(ctx + ": limit needs both lower and upper");
        }
    }
    if (j.kind == JointKind::fixed) j.limits.reset();

    if (auto m = attr(node, "masked")) {
        if (*m == "true" || *m == "1") j.masked = true;
        else if (*m != "false" && *m != "0") throw ValidationError(ctx + ": masked must be true or false");
    }
    if (masked_names.count(j.name)) j.masked = true;

    if (j.kind != JointKind::fixed && !j.masked && !j.limits)
        throw ValidationError(ctx + ": missing limits on " + std::string(to_string(j.kind)) + " joint");
    return j;
}

}  // namespace

KinematicChain parse_chain(std::string_view source, const ChainOptions& options) {
    const XmlElement robot = parse_xml(source);
    if (robot.name != "robot") throw ParseError("no <robot> element");
    const std::string robot_name = attr(robot, "name").value_or("");

    const std::set<std::string> masked(options.masked_joints.begin(), options.masked_joints.end());
    std::set<std::string> links;
    std::vector<Joint> all;
    for (const auto& node : robot.children) {
        if (node.name == "link") {
            links.insert(required_attr(node, "name", "link"));
        } else if (node.name == "joint") {
            all.push_back(parse_joint(node, masked));
        }
    }
    for (const auto& name : options.masked_joints) {
        bool found = false;
        for (const auto& j : all) found = found || j.name == name;
        if (!found) throw ValidationError("masked joint '" + name + "' not found");
    }

    std::map<std::string, std::size_t> parent_joint;  // child link -> joint index
    std::map<std::string, std::vector<std::size_t>> child_joints;
    for (std::size_t i = 0; i < all.size(); ++i) {
        const Joint& j = all[i];
        links.insert(j.parent_link);
        links.insert(j.child_link);
        if (!parent_joint.emplace(j.child_link, i).second)
            throw TopologyError("link '" + j.child_link + "' has more than one parent joint");
        child_joints[j.parent_link].push_back(i);
    }
    if (links.empty()) throw ValidationError("robot has no links");

    std::string base = options.base_link;
    if (base.empty()) {
        std::vector<std::string> roots;
        for (const auto& l : links)
            if (!parent_joint.count(l)) roots.push_back(l);
        if (roots.size() != 1) throw TopologyError("expected exactly one root link, found " + std::to_string(roots.size()));
        base = roots.front();
    } else if (!links.count(base)) {
        throw ValidationError("base link '" + base + "' not found");
    }

    std::vector<std::size_t> path;
    std::string tip = options.tip_link;
    if (tip.empty()) {
        std::string link = base;
        for (;;) {
            auto it = child_joints.find(link);
            if (it == child_joints.end() || it->second.empty()) break;
            if (it->second.size() > 1)
                throw TopologyError("link '" + link + "' branches into " + std::to_string(it->second.size()) +
                                    " joints; declare a tip link");
            path.push_back(it->second.front());
            link = all[it->second.front()].child_link;
            if (path.size() > all.size()) throw TopologyError("kinematic loop detected");
        }
        tip = link;
    } else {
        if (!links.count(tip)) throw ValidationError("tip link '" + tip + "' not found");
        std::string link = tip;
        while (link != base) {
            auto it = parent_joint.find(link);
            if (it == parent_joint.end())
                throw TopologyError("tip link '" + tip + "' is not below base link '" + base + "'");
            path.push_back(it->second);
            link = all[it->second].parent_link;
            if (path.size() > all.size()) throw TopologyError("kinematic loop detected");
        }
        std::reverse(path.begin(), path.end());
    }

    std::vector<Joint> joints;
    joints.reserve(path.size());
    for (std::size_t i : path) joints.push_back(all[i]);
    return KinematicChain(robot_name, base, tip, std::move(joints));
}

KinematicChain load_chain(const std::string& path, const ChainOptions& options) {
    std::ifstream in(path);
    if (!in) throw ValidationError("cannot open chain file '" + path + "'");
    std::ostringstream ss;
    ss << in.rdbuf();
    return parse_chain(ss.str(), options);
}

std::string to_urdf(const KinematicChain& chain) {
    std::ostringstream os;
    os << "<?xml version=\"1.0\"?>\n<robot name=\"" << chain.robot_name() << "\">\n";
    os << "  <link name=\"" << chain.base_link() << "\"/>\n";
    for (const auto& j : chain.joints()) os << "  <link name=\"" << j.child_link << "\"/>\n";
    for (const auto& j : chain.joints()) {
        os << "  <joint name=\"" << j.name << "\" type=\"" << to_string(j.kind) << "\"";
        if (j.masked) os << " masked=\"true\"";
        os << ">\n";
        os << "    <parent link=\"" << j.parent_link << "\"/>\n";
        os << "    <child link=\"" << j.child_link << "\"/>\n";
        os << "    <origin xyz=\"" << vec_short(j.origin_xyz) << "\" rpy=\"" << vec_short(j.origin_rpy) << "\"/>\n";
        os << "    <axis xyz=\"" << vec_short(j.axis_declared) << "\"/>\n";
        if (j.limits)
            os << "    <limit lower=\"" << short_text(j.limits->lower) << "\" upper=\""
               << short_text(j.limits->upper) << "\"/>\n";
        os << "  </joint>\n";
    }
    os << "</robot>\n";
    return os.str();
}

std::string describe(const KinematicChain& chain) {
    std::ostringstream os;
    os << "robot: " << chain.robot_name() << "\n";
    os << "base: " << chain.base_link() << "\n";
    os << "tip: " << chain.tip_link() << "\n";
    os << "dof: " << chain.dof() << "\n";
    os << "fingerprint: " << chain.fingerprint() << "\n";
    os << "reach_m: " << short_text(chain.reach()) << "\n";
    os << "joints:\n";
    for (const auto& j : chain.joints()) {
        os << "  " << j.name << " " << to_string(j.kind);
        if (j.masked) os << " masked";
        else if (j.active()) os << " active";
        if (j.limits) os << " [" << short_text(j.limits->lower) << ", " << short_text(j.limits->upper) << "]";
        os << "\n";
    }
    return os.str();
}

// ---------------------------------------------------------------------------
// Kinematics

namespace {

void check_dof(const KinematicChain& chain, const JointConfig& q) {
    if (static_cast<std::size_t>(q.size()) != chain.dof())
        throw DimensionError("configuration has " + std::to_string(q.size()) + " entries, chain dof is " +
                             std::to_string(chain.dof()));
}

RigidTransform joint_motion(const Joint& j, double value) {
    RigidTransform m;
    if (j.kind == JointKind::revolute) m.rotation = Eigen::AngleAxisd(value, j.axis).toRotationMatrix();
    else m.translation = j.axis * value;
    return m;
}

}  // namespace

RigidTransform forward_kinematics(const KinematicChain& chain, const JointConfig& q) {
    check_dof(chain, q);
    RigidTransform t;
    std::size_t k = 0;
    for (const auto& j : chain.joints()) {
        t = t * j.origin;
        if (j.active()) t = t * joint_motion(j, q[k++]);
    }
    return t;
}

Eigen::Matrix<double, 3, Eigen::Dynamic> jacobian(const KinematicChain& chain, const JointConfig& q) {
    check_dof(chain, q);
    Eigen::Matrix<double, 3, Eigen::Dynamic> jac(3, chain.dof());
    std::vector<Eigen::Vector3d> axes;
    std::vector<Eigen::Vector3d> points;
    RigidTransform t;
    std::size_t k = 0;
    for (const auto& j : chain.joints()) {
        t = t * j.origin;
        if (j.active()) {
            axes.push_back(t.rotation * j.axis);
            points.push_back(t.translation);
            t = t * joint_motion(j, q[k++]);
        }
    }
    for (std::size_t i = 0; i < chain.dof(); ++i) {
        if (chain.active(i).kind == JointKind::revolute) jac.col(i) = axes[i].cross(t.translation - points[i]);
        else jac.col(i) = axes[i];
    }
    return jac;
}

JointConfig sample_config(const KinematicChain& chain, Rng& rng) {
    JointConfig q(chain.dof());
    for (std::size_t i = 0; i < chain.dof(); ++i) {
        const auto& lim = *chain.active(i).limits;
        q[i] = rng.uniform(lim.lower, lim.upper);
    }
    return q;
}

Eigen::Matrix3Xd forward_positions(const KinematicChain& chain, const Eigen::MatrixXd& configs) {
    if (static_cast<std::size_t>(configs.rows()) != chain.dof())
        throw DimensionError("configuration matrix rows do not match dof");
    const Eigen::Index n = configs.cols();
    Eigen::Matrix3Xd out(3, n);
#pragma omp parallel for schedule(static)
    for (Eigen::Index i = 0; i < n; ++i) {
        out.col(i) = forward_kinematics(chain, configs.col(i)).translation;
    }
    return out;
}

// ---------------------------------------------------------------------------
// Dataset

IkDataset generate_dataset(const KinematicChain& chain, std::size_t n, std::uint64_t seed) {
    if (n == 0) throw ValidationError("dataset size must be at least 1");
    // Configurations are drawn sequentially so the sample order is independent
    // of how the FK pass below is scheduled.
    Rng rng(seed);
    Eigen::MatrixXd configs(chain.dof(), static_cast<Eigen::Index>(n));
    for (std::size_t i = 0; i < n; ++i) configs.col(static_cast<Eigen::Index>(i)) = sample_config(chain, rng);
    const Eigen::Matrix3Xd positions = forward_positions(chain, configs);

    IkDataset ds;
    ds.chain_fingerprint = chain.fingerprint();
    ds.seed = seed;
    ds.dof = chain.dof();
    ds.samples.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
        ds.samples[i].position = positions.col(static_cast<Eigen::Index>(i));
        ds.samples[i].config = configs.col(static_cast<Eigen::Index>(i));
    }
    return ds;
}

void write_dataset(std::ostream& out, const IkDataset& ds) {
    out << "# mdn-ik dataset v1, chain=" << ds.chain_fingerprint << ", n=" << ds.samples.size()
        << ", seed=" << ds.seed << "\n";
    std::string line;
    for (const auto& s : ds.samples) {
        line.clear();
        for (int i = 0; i < 3; ++i) {
            if (i) line += ',';
            line += format_double(s.position[i]);
        }
        for (Eigen::Index i = 0; i < s.config.size(); ++i) {
            line += ',';
            line += format_double(s.config[i]);
        }
        line += '\n';
        out << line;
    }
}

IkDataset read_dataset(std::istream& in) {
    std::string header;
    if (!std::getline(in, header)) throw ParseError("empty dataset file", 1);
    IkDataset ds;
    std::size_t n = 0;
    {
        char chain[64] = {0};
        unsigned long long count = 0, seed = 0;
        if (std::sscanf(header.c_str(), "# mdn-ik dataset v1, chain=%63[^,], n=%llu, seed=%llu", chain, &count,
                        &seed) != 3)
            throw ParseError("bad dataset header", 1);
        ds.chain_fingerprint = chain;
        ds.seed = seed;
        n = count;
    }
    ds.samples.reserve(n);
    std::string line;
    int lineno = 1;
    std::size_t width = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        std::vector<double> vals;
        const char* p = line.data();
        const char* end = p + line.size();
        while (p < end) {
            double v = 0.0;
            auto res = std::from_chars(p, end, v);
            if (res.ec != std::errc() || !std::isfinite(v)) throw ParseError("bad number in dataset row", lineno);
            vals.push_back(v);
            p = res.ptr;
            if (p < end) {
                if (*p != ',') throw ParseError("expected ',' in dataset row", lineno);
                ++p;
            }
        }
        if (vals.size() < 3) throw ParseError("dataset row has fewer than 3 columns", lineno);
        if (width == 0) width = vals.size();
        else if (vals.size() != width) throw ParseError("inconsistent dataset row width", lineno);
        IkSample s;
        s.position = Eigen::Vector3d(vals[0], vals[1], vals[2]);
        s.config = Eigen::Map<const Eigen::VectorXd>(vals.data() + 3, static_cast<Eigen::Index>(vals.size() - 3));
        ds.samples.push_back(std::move(s));
    }
    if (ds.samples.size() != n)
        throw ParseError("dataset header says n=" + std::to_string(n) + " but file has " +
                         std::to_string(ds.samples.size()) + " rows");
    ds.dof = width > 3 ? width - 3 : 0;
    return ds;
}

void save_dataset(const std::string& path, const IkDataset& dataset) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw ValidationError("cannot write dataset file '" + path + "'");
    write_dataset(out, dataset);
    if (!out) throw Error("write failed for '" + path + "'");
}

IkDataset load_dataset(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ValidationError("cannot open dataset file '" + path + "'");
    return read_dataset(in);
}

}  // namespace mdnik
