#pragma once

#include <array>
#include <cmath>
#include <numbers>
#include <optional>
#include <set>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "phasealign/data/preprocess.hpp"

namespace phasealign::data {

inline constexpr int kPhases = 4;
inline constexpr int kSlices = 3;
inline constexpr int kPortal = 2;  // fixed reference phase
inline constexpr std::array<const char*, kPhases> kPhaseNames{"pre", "arterial", "portal", "delayed"};

/// Pseudo-HU levels per phase (pre, arterial, portal, delayed).
struct EnhancementProfile {
    std::array<double, kPhases> liver{90, 90, 90, 90};
    std::array<double, kPhases> lesion{70, 140, 60, 55};
};

struct PhantomSpec {
    int image_size = 96;
    int lesion_count_min = 1;
    int lesion_count_max = 1;
    double lesion_radius_min = 7.0;
    double lesion_radius_max = 12.0;
    EnhancementProfile profile;
    double profile_jitter = 15.0;  // per-sample uniform perturbation of each lesion level
    double noise_sigma = 8.0;
    double body_hu = 40.0;
    double air_hu = -1000.0;
    // liver ellipse, before per-sample jitter
    double liver_cx = 48.0, liver_cy = 50.0, liver_rx = 32.0, liver_ry = 26.0;
    double liver_jitter = 3.0;
    double slice_radius_jitter = 0.05;
    // lesion mimics: enhancing nodules without washout, and non-enhancing cysts
    int max_mimics = 2;
    std::array<double, kPhases> nodule_hu{70, 150, 135, 115};
    std::array<double, kPhases> cyst_hu{15, 15, 15, 15};

    void validate() const {
        auto fail = [](const std::string& what) { throw std::invalid_argument("phantom spec: " + what); };
        if (image_size < 16 || image_size % 8) fail("image size must be a multiple of 8 and at least 16");
        if (lesion_count_min < 0 || lesion_count_max < lesion_count_min) fail("lesion count range is empty");
        if (!(lesion_radius_min > 0) || lesion_radius_max < lesion_radius_min) fail("lesion radius range is empty");
        if (noise_sigma < 0 || profile_jitter < 0 || max_mimics < 0) fail("negative noise, jitter or mimic count");
        const auto& p = profile;
        if (p.lesion[1] - profile_jitter <= p.liver[1]) fail("arterial lesion level must exceed the liver");
        for (int ph : {2, 3})
            if (p.lesion[ph] + profile_jitter >= p.liver[ph])
                fail(std::string(kPhaseNames[ph]) + " lesion level must stay below the liver");
    }
};

enum class MisalignmentKind { none, translation, rigid, affine, elastic };

inline const char* to_string(MisalignmentKind k) {
    switch (k) {
        case MisalignmentKind::none: return "none";
        case MisalignmentKind::translation: return "translation";
        case MisalignmentKind::rigid: return "rigid";
        case MisalignmentKind::affine: return "affine";
        case MisalignmentKind::elastic: return "elastic";
    }
    return "?";
}

inline MisalignmentKind misalignment_kind_from_string(const std::string& s) {
    for (auto k : {MisalignmentKind::none, MisalignmentKind::translation, MisalignmentKind::rigid,
                   MisalignmentKind::affine, MisalignmentKind::elastic})
        if (s == to_string(k)) return k;
    throw std::invalid_argument("unknown misalignment kind '" + s + "'");
}

struct MisalignmentSpec {
    MisalignmentKind kind = MisalignmentKind::none;
    double magnitude = 0.0;  // max displacement in px
    bool independent_phases = true;
    std::uint64_t seed = 0;

    /// Tier by magnitude: 0 aligned, up to 2 rigid, up to 4 affine, beyond elastic.
    static MisalignmentSpec tier(double px, std::uint64_t seed = 0) {
        MisalignmentKind k = px <= 0   ? MisalignmentKind::none
                             : px <= 2 ? MisalignmentKind::rigid
                             : px <= 4 ? MisalignmentKind::affine
                                       : MisalignmentKind::elastic;
        return {k, px <= 0 ? 0.0 : px, true, seed};
    }
};

/// One low-frequency sinusoidal displacement component.
struct ElasticMode {
    double ax = 0, ay = 0;  // amplitudes in px
    double fx = 0, fy = 0;  // spatial frequency in cycles per image
    double phase = 0;
};

/// Maps an output pixel p to the scene point p + d(p) that it shows.
struct PhaseWarp {
    double a11 = 1, a12 = 0, a21 = 0, a22 = 1;  // linear part about the image centre
    double tx = 0, ty = 0;
    std::vector<ElasticMode> modes;

    bool identity() const { return a11 == 1 && a12 == 0 && a21 == 0 && a22 == 1 && tx == 0 && ty == 0 && modes.empty(); }

    std::array<double, 2> displacement(double x, double y, double size) const {
        const double c = size / 2, u = x - c, v = y - c;
        double dx = (a11 - 1) * u + a12 * v + tx;
        double dy = a21 * u + (a22 - 1) * v + ty;
        for (const auto& m : modes) {
            const double s = std::sin(2 * std::numbers::pi * (m.fx * x + m.fy * y) / size + m.phase);
            dx += m.ax * s;
            dy += m.ay * s;
        }
        return {dx, dy};
    }

    /// det(I + grad d) at (x, y).
    double jacobian(double x, double y, double size) const {
        double j11 = a11, j12 = a12, j21 = a21, j22 = a22;
        for (const auto& m : modes) {
            const double k = 2 * std::numbers::pi / size;
            const double c = std::cos(k * (m.fx * x + m.fy * y) + m.phase) * k;
            j11 += m.ax * c * m.fx;
            j12 += m.ax * c * m.fy;
            j21 += m.ay * c * m.fx;
            j22 += m.ay * c * m.fy;
        }
        return j11 * j22 - j12 * j21;
    }
};

/// Rotated ellipse; axes are half-lengths in px.
struct Ellipse {
    double cx = 0, cy = 0, rx = 1, ry = 1, angle = 0;

    bool contains(double x, double y) const {
        const double c = std::cos(angle), s = std::sin(angle);
        const double u = (x - cx) * c + (y - cy) * s, v = -(x - cx) * s + (y - cy) * c;
        return (u * u) / (rx * rx) + (v * v) / (ry * ry) <= 1.0;
    }
    Ellipse scaled(double f) const { return {cx, cy, rx * f, ry * f, angle}; }
};

struct Mimic {
    Ellipse shape;
    bool cyst = false;
};

/// Geometry and levels of one sample before rendering.
struct Scene {
    Ellipse body, liver;
    std::vector<Ellipse> lesions;
    std::vector<Mimic> mimics;
    std::array<double, kPhases> lesion_hu{};
};

struct MultiphaseSample {
    int size = 0;
    std::vector<float> image;  // [phase * 3 + slice, y, x], windowed to [0, 1]
    std::vector<Box> gt_boxes;  // in the annotation phase's frame
    std::array<Mask, kPhases> lesion_mask;
    std::array<Mask, kPhases> liver_mask;
    int annotation_phase = kPortal;
    MisalignmentSpec misalignment;
    std::array<PhaseWarp, kPhases> warps;
    std::uint64_t seed = 0;
};

namespace detail {

inline double uniform(std::mt19937_64& rng, double lo, double hi) {
    return std::uniform_real_distribution<double>(lo, hi)(rng);
}

/// Centre of the displacement bound: warps are sized so that points within this radius
/// of the image centre move by at most the tier magnitude.
inline double warp_radius(int size) { return 0.45 * size; }

inline PhaseWarp draw_warp(MisalignmentKind kind, double m, int size, std::mt19937_64& rng) {
    PhaseWarp w;
    if (kind == MisalignmentKind::none || m <= 0) return w;
    const double R = warp_radius(size);
    auto translate = [&](double amount) {
        const double dir = uniform(rng, 0, 2 * std::numbers::pi);
        const double len = amount * uniform(rng, 0.5, 1.0);
        w.tx = len * std::cos(dir);
        w.ty = len * std::sin(dir);
    };
    switch (kind) {
        case MisalignmentKind::translation: translate(m); break;
        case MisalignmentKind::rigid: {
            translate(m / 2);
            const double theta = (m / 2) / R * uniform(rng, 0.5, 1.0) * (uniform(rng, 0, 1) < 0.5 ? -1 : 1);
            w.a11 = w.a22 = std::cos(theta);
            w.a12 = -std::sin(theta);
            w.a21 = std::sin(theta);
            break;
        }
        case MisalignmentKind::affine: {
            translate(m / 2);
            std::array<double, 4> e;
            double norm = 0;
            for (auto& v : e) norm += (v = uniform(rng, -1, 1)) * v;
            const double scale = (m / 2) / R * uniform(rng, 0.5, 1.0) / std::sqrt(norm);
            w.a11 += e[0] * scale;
            w.a12 = e[1] * scale;
            w.a21 = e[2] * scale;
            w.a22 += e[3] * scale;
            break;
        }
        case MisalignmentKind::elastic: {
            translate(m / 2);
            const int n = 3;
            double total = 0;
            for (int i = 0; i < n; ++i) {
                ElasticMode mode;
                mode.ax = uniform(rng, -1, 1);
                mode.ay = uniform(rng, -1, 1);
                mode.fx = uniform(rng, 0.5, 1.5) * (uniform(rng, 0, 1) < 0.5 ? -1 : 1);
                mode.fy = uniform(rng, 0.5, 1.5) * (uniform(rng, 0, 1) < 0.5 ? -1 : 1);
                mode.phase = uniform(rng, 0, 2 * std::numbers::pi);
                total += std::hypot(mode.ax, mode.ay);
                w.modes.push_back(mode);
            }
            const double scale = (m / 2) * uniform(rng, 0.5, 1.0) / total;
            for (auto& mode : w.modes) mode.ax *= scale, mode.ay *= scale;
            break;
        }
        case MisalignmentKind::none: break;
    }
    return w;
}

inline bool inside_with_margin(const Ellipse& outer, double x, double y, double r, double margin) {
    // Conservative: the disk of radius r + margin fits if 8 boundary points and the centre do.
    for (int k = 0; k < 16; ++k) {
        const double a = k * std::numbers::pi / 8;
        if (!outer.contains(x + (r + margin) * std::cos(a), y + (r + margin) * std::sin(a))) return false;
    }
    return outer.contains(x, y);
}

}  // namespace detail

/// Draws the per-sample geometry and lesion levels.
inline Scene draw_scene(const PhantomSpec& spec, std::mt19937_64& rng) {
    using detail::uniform;
    Scene s;
    const double S = spec.image_size, k = S / 96.0;
    s.body = {S / 2 + uniform(rng, -2, 2) * k, S / 2 + uniform(rng, -2, 2) * k, 0.46 * S, 0.42 * S, 0};
    const double j = spec.liver_jitter * k;
    s.liver = {spec.liver_cx * k + uniform(rng, -j, j), spec.liver_cy * k + uniform(rng, -j, j),
               spec.liver_rx * k + uniform(rng, -j, j), spec.liver_ry * k + uniform(rng, -j, j),
               uniform(rng, -0.25, 0.25)};
    for (int p = 0; p < kPhases; ++p)
        s.lesion_hu[static_cast<std::size_t>(p)] =
            spec.profile.lesion[static_cast<std::size_t>(p)] + uniform(rng, -spec.profile_jitter, spec.profile_jitter);

    const int count = std::uniform_int_distribution<int>(spec.lesion_count_min, spec.lesion_count_max)(rng);
    std::vector<std::array<double, 3>> placed;  // x, y, r
    auto place = [&](double r, double gap) -> std::optional<std::array<double, 2>> {
        const double margin = 1.5 * k;
        for (int attempt = 0; attempt < 1000; ++attempt) {
            const double x = uniform(rng, s.liver.cx - s.liver.rx, s.liver.cx + s.liver.rx);
            const double y = uniform(rng, s.liver.cy - s.liver.rx, s.liver.cy + s.liver.rx);
            if (!detail::inside_with_margin(s.liver, x, y, r, margin)) continue;
            bool clear = true;
            for (const auto& q : placed) clear = clear && std::hypot(x - q[0], y - q[1]) > r + q[2] + gap;
            if (clear) return std::array<double, 2>{x, y};
        }
        return std::nullopt;
    };
    for (int i = 0; i < count; ++i) {
        const double r = uniform(rng, spec.lesion_radius_min, spec.lesion_radius_max) * k;
        const auto c = place(r, 4 * k);
        if (!c)
            throw std::invalid_argument("phantom: lesion of radius " + std::to_string(r) +
                                        " px cannot fit inside the liver");
        const double aspect = uniform(rng, 0.85, 1.15);
        s.lesions.push_back({(*c)[0], (*c)[1], r * aspect, r / aspect, uniform(rng, 0, std::numbers::pi)});
        placed.push_back({(*c)[0], (*c)[1], r * std::max(aspect, 1 / aspect)});
    }
    const int mimics = std::uniform_int_distribution<int>(0, spec.max_mimics)(rng);
    for (int i = 0; i < mimics; ++i) {
        const double r = uniform(rng, 4.0, 8.0) * k;
        const bool cyst = uniform(rng, 0, 1) < 0.5;
        const auto c = place(r, 3 * k);
        if (!c) continue;  // crowded liver: fewer mimics is fine
        s.mimics.push_back({{(*c)[0], (*c)[1], r, r, 0}, cyst});
        placed.push_back({(*c)[0], (*c)[1], r});
    }
    return s;
}

/// Phase with the largest lesion-to-liver contrast.
inline int annotation_phase(const Scene& s, const PhantomSpec& spec) {
    int best = 0;
    double contrast = -1;
    for (int p = 0; p < kPhases; ++p) {
        const auto i = static_cast<std::size_t>(p);
        const double c = std::abs(s.lesion_hu[i] - spec.profile.liver[i]);
        if (c > contrast) contrast = c, best = p;
    }
    return best;
}

/// Renders, warps, adds noise and windows one four-phase 2.5D sample.
inline MultiphaseSample generate_sample(const PhantomSpec& spec, const MisalignmentSpec& mis, std::uint64_t seed) {
    spec.validate();
    if (mis.magnitude < 0) throw std::invalid_argument("misalignment magnitude must be non-negative");
    std::mt19937_64 rng(seed);
    const Scene scene = draw_scene(spec, rng);

    MultiphaseSample out;
    out.size = spec.image_size;
    out.seed = seed;
    out.misalignment = mis;
    const int S = spec.image_size;
    const std::size_t plane = static_cast<std::size_t>(S) * S;

    std::mt19937_64 warp_rng(mis.seed ^ (seed * 0x9E3779B97F4A7C15ull));
    const PhaseWarp shared = detail::draw_warp(mis.kind, mis.magnitude, S, warp_rng);
    for (int p = 0; p < kPhases; ++p) {
        if (p == kPortal) continue;
        out.warps[static_cast<std::size_t>(p)] =
            mis.independent_phases ? detail::draw_warp(mis.kind, mis.magnitude, S, warp_rng) : shared;
    }

    // Out-of-plane neighbours: each shape's radius is perturbed independently per slice.
    const std::size_t nshapes = 2 + scene.lesions.size() + scene.mimics.size();
    std::array<std::vector<double>, kSlices> slice_scale;
    for (int sl = 0; sl < kSlices; ++sl)
        for (std::size_t i = 0; i < nshapes; ++i)
            slice_scale[static_cast<std::size_t>(sl)].push_back(
                sl == 1 ? 1.0 : 1.0 + detail::uniform(rng, -spec.slice_radius_jitter, spec.slice_radius_jitter));

    std::normal_distribution<double> noise(0.0, spec.noise_sigma);
    out.image.assign(static_cast<std::size_t>(kPhases * kSlices) * plane, 0.f);
    for (int p = 0; p < kPhases; ++p) {
        const auto pi = static_cast<std::size_t>(p);
        const auto& warp = out.warps[pi];
        out.lesion_mask[pi] = Mask(S, S);
        out.liver_mask[pi] = Mask(S, S);
        for (int sl = 0; sl < kSlices; ++sl) {
            const auto& f = slice_scale[static_cast<std::size_t>(sl)];
            float* dst = out.image.data() + (pi * kSlices + static_cast<std::size_t>(sl)) * plane;
            for (int y = 0; y < S; ++y)
                for (int x = 0; x < S; ++x) {
                    const double px = x + 0.5, py = y + 0.5;
                    const auto d = warp.displacement(px, py, S);
                    const double qx = px + d[0], qy = py + d[1];
                    double hu = spec.air_hu;
                    if (scene.body.scaled(f[0]).contains(qx, qy)) hu = spec.body_hu;
                    const bool in_liver = scene.liver.scaled(f[1]).contains(qx, qy);
                    if (in_liver) hu = spec.profile.liver[pi];
                    bool in_lesion = false;
                    for (std::size_t m = 0; m < scene.mimics.size(); ++m)
                        if (scene.mimics[m].shape.scaled(f[2 + scene.lesions.size() + m]).contains(qx, qy))
                            hu = scene.mimics[m].cyst ? spec.cyst_hu[pi] : spec.nodule_hu[pi];
                    for (std::size_t l = 0; l < scene.lesions.size(); ++l)
                        if (scene.lesions[l].scaled(f[2 + l]).contains(qx, qy)) {
                            hu = scene.lesion_hu[pi];
                            in_lesion = true;
                        }
                    dst[static_cast<std::size_t>(y) * S + x] = static_cast<float>(hu_window(hu + noise(rng)));
                    if (sl == 1) {
                        out.liver_mask[pi].at(y, x) = in_liver;
                        out.lesion_mask[pi].at(y, x) = in_lesion;
                    }
                }
        }
    }

    // Stored lesion masks are the smoothed ones the boxes are read from.
    for (auto& m : out.lesion_mask) m = smooth_mask(m);

    out.annotation_phase = annotation_phase(scene, spec);
    // One box per lesion, each from its own mask in the annotation frame.
    const auto& warp = out.warps[static_cast<std::size_t>(out.annotation_phase)];
    for (const auto& lesion : scene.lesions) {
        Mask m(S, S);
        for (int y = 0; y < S; ++y)
            for (int x = 0; x < S; ++x) {
                const auto d = warp.displacement(x + 0.5, y + 0.5, S);
                m.at(y, x) = lesion.contains(x + 0.5 + d[0], y + 0.5 + d[1]);
            }
        if (auto b = mask_to_box(m)) out.gt_boxes.push_back(*b);
    }
    return out;
}

// ---------------------------------------------------------------- JSON

inline nlohmann::json to_json(const PhantomSpec& s) {
    return {{"image_size", s.image_size},
            {"lesion_count_min", s.lesion_count_min},
            {"lesion_count_max", s.lesion_count_max},
            {"lesion_radius_min", s.lesion_radius_min},
            {"lesion_radius_max", s.lesion_radius_max},
            {"liver_hu", s.profile.liver},
            {"lesion_hu", s.profile.lesion},
            {"profile_jitter", s.profile_jitter},
            {"noise_sigma", s.noise_sigma},
            {"body_hu", s.body_hu},
            {"air_hu", s.air_hu},
            {"liver_ellipse", {s.liver_cx, s.liver_cy, s.liver_rx, s.liver_ry}},
            {"liver_jitter", s.liver_jitter},
            {"slice_radius_jitter", s.slice_radius_jitter},
            {"max_mimics", s.max_mimics},
            {"nodule_hu", s.nodule_hu},
            {"cyst_hu", s.cyst_hu}};
}

namespace detail {

inline void reject_unknown_keys(const nlohmann::json& j, const std::set<std::string>& known, const std::string& where) {
    if (!j.is_object()) throw std::invalid_argument(where + " must be a JSON object");
    for (const auto& [key, value] : j.items())
        if (!known.count(key)) throw std::invalid_argument("unknown key '" + key + "' in " + where);
}

}  // namespace detail

/// Missing keys keep their defaults; unknown keys are rejected.
inline PhantomSpec phantom_spec_from_json(const nlohmann::json& j) {
    PhantomSpec s;
    const auto known = to_json(s);
    std::set<std::string> keys;
    for (const auto& [k, v] : known.items()) keys.insert(k);
    detail::reject_unknown_keys(j, keys, "phantom spec");
    auto get = [&](const char* key, auto& field) {
        if (j.contains(key)) j.at(key).get_to(field);
    };
    get("image_size", s.image_size);
    get("lesion_count_min", s.lesion_count_min);
    get("lesion_count_max", s.lesion_count_max);
    get("lesion_radius_min", s.lesion_radius_min);
    get("lesion_radius_max", s.lesion_radius_max);
    get("liver_hu", s.profile.liver);
    get("lesion_hu", s.profile.lesion);
    get("profile_jitter", s.profile_jitter);
    get("noise_sigma", s.noise_sigma);
    get("body_hu", s.body_hu);
    get("air_hu", s.air_hu);
    if (j.contains("liver_ellipse")) {
        const auto e = j.at("liver_ellipse").get<std::array<double, 4>>();
        s.liver_cx = e[0], s.liver_cy = e[1], s.liver_rx = e[2], s.liver_ry = e[3];
    }
    get("liver_jitter", s.liver_jitter);
    get("slice_radius_jitter", s.slice_radius_jitter);
    get("max_mimics", s.max_mimics);
    get("nodule_hu", s.nodule_hu);
    get("cyst_hu", s.cyst_hu);
    s.validate();
    return s;
}

inline nlohmann::json to_json(const MisalignmentSpec& m) {
    return {{"kind", to_string(m.kind)},
            {"magnitude", m.magnitude},
            {"independent_phases", m.independent_phases},
            {"seed", m.seed}};
}

inline nlohmann::json to_json(const PhaseWarp& w) {
    nlohmann::json modes = nlohmann::json::array();
    for (const auto& m : w.modes) modes.push_back({m.ax, m.ay, m.fx, m.fy, m.phase});
    return {{"linear", {w.a11, w.a12, w.a21, w.a22}}, {"translation", {w.tx, w.ty}}, {"modes", modes}};
}

inline MisalignmentSpec misalignment_from_json(const nlohmann::json& j) {
    detail::reject_unknown_keys(j, {"kind", "magnitude", "independent_phases", "seed"}, "misalignment spec");
    MisalignmentSpec m;
    if (j.contains("kind")) m.kind = misalignment_kind_from_string(j.at("kind").get<std::string>());
    m.magnitude = j.value("magnitude", 0.0);
    m.independent_phases = j.value("independent_phases", true);
    m.seed = j.value("seed", std::uint64_t{0});
    return m;
}

inline PhaseWarp warp_from_json(const nlohmann::json& j) {
    PhaseWarp w;
    const auto a = j.at("linear").get<std::vector<double>>();
    const auto t = j.at("translation").get<std::vector<double>>();
    w.a11 = a.at(0), w.a12 = a.at(1), w.a21 = a.at(2), w.a22 = a.at(3);
    w.tx = t.at(0), w.ty = t.at(1);
    for (const auto& m : j.at("modes")) w.modes.push_back({m[0], m[1], m[2], m[3], m[4]});
    return w;
}

}  // namespace phasealign::data
