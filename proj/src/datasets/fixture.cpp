#include <algorithm>
#include <cmath>

#include "duet/datasets.hpp"
#include "duet/errors.hpp"

namespace duet::datasets {

namespace fs = std::filesystem;

const std::vector<ColorName>& fixture_colors() {
    static const std::vector<ColorName> colors{
        {"red", 220, 30, 30},     {"green", 30, 170, 50},   {"blue", 30, 60, 220},   {"yellow", 235, 210, 20},
        {"purple", 140, 40, 180}, {"orange", 245, 130, 20}, {"pink", 240, 120, 190}, {"cyan", 20, 200, 210},
    };
    return colors;
}

const std::vector<Geometry>& fixture_geometries() {
    static const std::vector<Geometry> geoms = [] {
        std::vector<Geometry> g;
        for (int size = 0; size < 2; ++size)
            for (int pos = 0; pos < 4; ++pos)
                for (int s = 0; s < 5; ++s) g.push_back({static_cast<ShapeKind>(s), pos, size});
        return g;
    }();
    return geoms;
}

std::string shape_name(ShapeKind s) {
    switch (s) {
        case ShapeKind::circle: return "circle";
        case ShapeKind::square: return "square";
        case ShapeKind::triangle: return "triangle";
        case ShapeKind::diamond: return "diamond";
        case ShapeKind::cross: return "cross";
    }
    return "?";
}

std::string position_name(int position) {
    static const char* names[4] = {"top left", "top right", "bottom left", "bottom right"};
    return names[position & 3];
}

std::string size_name(int size) { return size ? "large" : "small"; }

namespace {

double box_sdf(double x, double y, double hx, double hy) {
    const double qx = std::fabs(x) - hx, qy = std::fabs(y) - hy;
    const double ox = std::max(qx, 0.0), oy = std::max(qy, 0.0);
    return std::sqrt(ox * ox + oy * oy) + std::min(std::max(qx, qy), 0.0);
}

// Equilateral triangle pointing up (image y grows downward).
double triangle_sdf(double x, double y, double r) {
    const double k = std::sqrt(3.0);
    double px = std::fabs(x) - r;
    double py = -y + r / k;
    if (px + k * py > 0.0) {
        const double nx = (px - k * py) / 2.0, ny = (-k * px - py) / 2.0;
        px = nx;
        py = ny;
    }
    px -= std::clamp(px, -2.0 * r, 0.0);
    return -std::sqrt(px * px + py * py) * (py < 0 ? -1.0 : 1.0);
}

double shape_sdf(ShapeKind s, double x, double y, double r) {
    switch (s) {
        case ShapeKind::circle: return std::sqrt(x * x + y * y) - r;
        case ShapeKind::square: return box_sdf(x, y, 0.82 * r, 0.82 * r);
        case ShapeKind::triangle: return triangle_sdf(x, y + 0.2 * r, 1.05 * r);
        case ShapeKind::diamond: return (std::fabs(x) + std::fabs(y) - 1.1 * r) / std::sqrt(2.0);
        case ShapeKind::cross: return std::min(box_sdf(x, y, r, 0.33 * r), box_sdf(x, y, 0.33 * r, r));
    }
    return 1.0;
}

std::uint8_t to_byte(double v) { return static_cast<std::uint8_t>(std::clamp(std::lround(v), 0L, 255L)); }

}  // namespace

image::Image render_shape(const Geometry& g, const ColorName& color, Style style, int side, std::mt19937_64& rng) {
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    const double cx0 = (g.position & 1) ? 0.68 : 0.32;
    const double cy0 = (g.position & 2) ? 0.68 : 0.32;
    const double r0 = g.size ? 0.2 : 0.12;
    const double px = 1.0 / side;
    image::Image img(side, side);

    if (style == Style::sketch) {
        const double cx = cx0 + 0.012 * u(rng), cy = cy0 + 0.012 * u(rng);
        const double r = r0 * (1.0 + 0.05 * u(rng));
        const double fa = 9.0 + 4.0 * u(rng), fb = 9.0 + 4.0 * u(rng);
        const double pa = 3.14 * u(rng), pb = 3.14 * u(rng);
        const double amp = 0.008;
        const double half_w = 0.9 * px;
        for (int y = 0; y < side; ++y)
            for (int x = 0; x < side; ++x) {
                double fx = (x + 0.5) * px - cx, fy = (y + 0.5) * px - cy;
                fx += amp * std::sin(fa * fy + pa);
                fy += amp * std::sin(fb * fx + pb);
                const double d = std::fabs(shape_sdf(g.shape, fx, fy, r));
                const double ink = std::clamp(1.0 - (d - half_w) / px, 0.0, 1.0);
                const double v = 255.0 - ink * (255.0 - 25.0);
                auto* p = img.px(x, y);
                p[0] = p[1] = p[2] = to_byte(v);
            }
        return img;
    }

    std::uniform_real_distribution<double> tint(200.0, 240.0);
    std::normal_distribution<double> noise(0.0, 4.0);
    const double bg[3] = {tint(rng), tint(rng), tint(rng)};
    const double fg[3] = {double(color.r), double(color.g), double(color.b)};
    for (int y = 0; y < side; ++y)
        for (int x = 0; x < side; ++x) {
            const double fx = (x + 0.5) * px - cx0, fy = (y + 0.5) * px - cy0;
            const double d = shape_sdf(g.shape, fx, fy, r0);
            const double cover = std::clamp(0.5 - d / px, 0.0, 1.0);
            const double shade = 1.0 - 0.25 * (fy / r0 + 1.0) * 0.5 * cover;
            auto* p = img.px(x, y);
            for (int c = 0; c < 3; ++c) {
                const double v = cover * fg[c] * shade + (1.0 - cover) * bg[c] + noise(rng);
                p[c] = to_byte(v);
            }
        }
    return img;
}

FixtureSummary make_fixture(const fs::path& out_dir, std::uint64_t seed, int side) {
    std::mt19937_64 rng(seed);
    const auto& geoms = fixture_geometries();
    const auto& colors = fixture_colors();
    fs::create_directories(out_dir / "sketches");
    fs::create_directories(out_dir / "photos");
    fs::create_directories(out_dir / "ambiguous");

    auto geom_tag = [](const Geometry& g) {
        return shape_name(g.shape) + "_" + std::to_string(g.position) + "_" + size_name(g.size);
    };

    // Geometry order is shuffled once so that train and test both mix shapes.
    std::vector<std::size_t> order(geoms.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::shuffle(order.begin(), order.end(), rng);

    DatasetManifest main;
    main.name = "shapes-fixture";
    std::uniform_int_distribution<std::size_t> pick_color(0, colors.size() - 1);
    std::vector<std::string> sketch_of(geoms.size());
    for (std::size_t k = 0; k < order.size(); ++k) {
        const Geometry& g = geoms[order[k]];
        const ColorName& c = colors[pick_color(rng)];
        const std::string tag = geom_tag(g);
        const std::string sk = "sketches/" + tag + ".png";
        const std::string ph = "photos/" + tag + "_" + c.name + ".png";
        image::save_png(out_dir / sk, render_shape(g, c, Style::sketch, side, rng));
        image::save_png(out_dir / ph, render_shape(g, c, Style::photo, side, rng));
        sketch_of[order[k]] = sk;
        PairEntry p;
        p.sketch = sk;
        p.photo.path = ph;
        p.photo.id = tag + "_" + c.name;
        p.photo.class_label = shape_name(g.shape);
        p.split = k < 32 ? Split::train : Split::test;
        p.caption = c.name;
        main.pairs.push_back(std::move(p));
    }

    // Attribute-ambiguous gallery: eight training geometries, each in every
    // colour. Queries reuse the training sketches with the colour as text.
    DatasetManifest amb;
    amb.name = "shapes-ambiguous";
    for (std::size_t k = 0; k < 8; ++k) {
        const std::size_t gi = order[k * 4];
        const Geometry& g = geoms[gi];
        for (const auto& c : colors) {
            const std::string id = "amb_" + geom_tag(g) + "_" + c.name;
            const std::string ph = "ambiguous/" + id + ".png";
            image::save_png(out_dir / ph, render_shape(g, c, Style::photo, side, rng));
            PairEntry p;
            p.sketch = sketch_of[gi];
            p.photo.path = ph;
            p.photo.id = id;
            p.photo.class_label = shape_name(g.shape);
            p.split = Split::test;
            p.caption = c.name;
            amb.pairs.push_back(std::move(p));
        }
    }

    FixtureSummary s{out_dir / "manifest.json", out_dir / "ambiguous.json"};
    save_manifest(s.main_manifest, main);
    save_manifest(s.ambiguous_manifest, amb);
    return s;
}

}  // namespace duet::datasets
