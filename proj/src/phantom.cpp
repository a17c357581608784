#include "cxrl/phantom.hpp"

#include <cmath>
#include <sstream>
#include <stdexcept>

#include "cxrl/ioutil.hpp"
#include "json.hpp"

namespace cxrl::phantom {

using nlohmann::json;

bool PostureParams::finite() const {
    return std::isfinite(s_x) && std::isfinite(s_y) && std::isfinite(t_x) &&
           std::isfinite(t_y) && std::isfinite(theta);
}

std::array<int, kNumLabels> labels_from_attrs(const PhantomAttrs& attrs) {
    return {attrs.effusion ? 1 : 0, attrs.cardiomegaly ? 1 : 0, attrs.opacity ? 1 : 0,
            attrs.device ? 1 : 0};
}

PhantomAttrs sample_attrs(RngStream& stream) {
    PhantomAttrs a;
    // Draw count is fixed regardless of outcomes so streams stay aligned.
    a.effusion = stream.next_uniform() < 0.35;
    a.cardiomegaly = stream.next_uniform() < 0.35;
    a.opacity = stream.next_uniform() < 0.40;
    a.opacity_side = stream.next_uniform() < 0.5 ? Side::Left : Side::Right;
    a.opacity_size = stream.next_uniform() < 0.5 ? BlobSize::Small : BlobSize::Large;
    a.device = stream.next_uniform() < 0.30;
    for (auto& j : a.jitter) j = static_cast<float>(2.0 * stream.next_uniform() - 1.0);
    return a;
}

PostureParams sample_posture(RngStream& stream) {
    PostureParams p;
    p.s_x = kScaleLo + (kScaleHi - kScaleLo) * stream.next_uniform();
    p.s_y = kScaleLo + (kScaleHi - kScaleLo) * stream.next_uniform();
    p.t_x = kTransMax * (2.0 * stream.next_uniform() - 1.0);
    p.t_y = kTransMax * (2.0 * stream.next_uniform() - 1.0);
    p.theta = kRotMax * (2.0 * stream.next_uniform() - 1.0);
    return p;
}

std::string make_report(const PhantomAttrs& attrs, RngStream& stream) {
    // One draw per clause, taken up front, so the stream advances the same
    // way for every attribute combination.
    const double u_clear = stream.next_uniform();
    const double u_eff = stream.next_uniform();
    const double u_card = stream.next_uniform();
    const double u_opac = stream.next_uniform();
    const double u_dev = stream.next_uniform();

    std::vector<std::string> parts;
    if (!attrs.effusion && !attrs.opacity && u_clear < 0.5) parts.push_back("lungs clear .");

    if (attrs.effusion)
        parts.push_back(u_eff < 0.5 ? "effusion is seen ." : "effusion present .");
    else if (u_eff < 0.5)
        parts.push_back("no effusion .");

    if (attrs.cardiomegaly)
        parts.push_back(u_card < 0.5 ? "cardiomegaly present ." : "the heart is enlarged .");
    else if (u_card < 0.5)
        parts.push_back("no cardiomegaly .");

    if (attrs.opacity) {
        const std::string size = attrs.opacity_size == BlobSize::Small ? "small" : "large";
        const std::string side = attrs.opacity_side == Side::Left ? "left" : "right";
        parts.push_back(u_opac < 0.5 ? "a " + size + " round opacity in the " + side + " lung ."
                                     : size + " opacity seen in the " + side + " lung .");
    } else if (u_opac < 0.5) {
        parts.push_back("no opacity seen .");
    }

    if (attrs.device)
        parts.push_back(u_dev < 0.5 ? "support device present ." : "a support device is seen .");
    else if (u_dev < 0.5)
        parts.push_back("no support device .");

    if (parts.empty()) parts.push_back("lungs clear .");

    std::string report;
    for (size_t i = 0; i < parts.size(); ++i) {
        if (i) report += " ";
        report += parts[i];
    }
    return report;
}

namespace {

double mix(double a, double b, double t) { return a + (b - a) * t; }

// Coverage ramps from 1 to 0 as d crosses 1; ramp half-width w.
double soft_cov(double d, double w) { return std::clamp((1.0 - d) / (2.0 * w) + 0.5, 0.0, 1.0); }

double ellipse_d(double x, double y, double cx, double cy, double rx, double ry) {
    const double dx = (x - cx) / rx, dy = (y - cy) / ry;
    return std::sqrt(dx * dx + dy * dy);
}

double seg_dist(double px, double py, double ax, double ay, double bx, double by) {
    const double vx = bx - ax, vy = by - ay;
    const double len2 = vx * vx + vy * vy;
    double t = len2 > 0.0 ? ((px - ax) * vx + (py - ay) * vy) / len2 : 0.0;
    t = std::clamp(t, 0.0, 1.0);
    const double dx = px - (ax + t * vx), dy = py - (ay + t * vy);
    return std::sqrt(dx * dx + dy * dy);
}

std::string quantize_bytes(const Tensor& image) {
    std::string q(image.data.size(), '\0');
    for (size_t i = 0; i < image.data.size(); ++i) {
        const long v = std::lround(static_cast<double>(image.data[i]) * 255.0);
        q[i] = static_cast<char>(static_cast<unsigned char>(std::clamp(v, 0l, 255l)));
    }
    return q;
}

}  // namespace

Tensor render_canonical(const PhantomAttrs& attrs, int size) {
    if (size < 8) throw std::invalid_argument("render_canonical: size too small");
    const auto& j = attrs.jitter;

    // All geometry in normalized [0,1] coordinates so any raster size works.
    const double body_cx = 0.5, body_cy = 0.56;
    const double body_rx = 0.40 * (1.0 + 0.05 * j[0]);
    const double body_ry = 0.46 * (1.0 + 0.05 * j[1]);

    const double lung_sep = 0.21 * (1.0 + 0.05 * j[2]);
    const double lung_cy = 0.47, lung_rx = 0.15, lung_ry = 0.26;

    const double heart_cx = 0.54 + 0.015 * j[3], heart_cy = 0.62;
    const double heart_scale = attrs.cardiomegaly ? 1.45 : 1.0;
    const double heart_rx = 0.13 * heart_scale, heart_ry = 0.15 * heart_scale;

    const double diaphragm_y = 0.74 + 0.02 * j[4];

    const double blob_cx = attrs.opacity_side == Side::Left ? (0.5 - lung_sep) : (0.5 + lung_sep);
    const double blob_cy = 0.44 + 0.03 * j[5];
    const double blob_r = attrs.opacity_size == BlobSize::Small ? 0.09 : 0.155;

    // Support device: a bright catheter-like polyline descending from the
    // upper mediastinum.
    const double dev_top = 0.16 + 0.02 * j[5];
    const double dev[4][2] = {{0.53, dev_top}, {0.55, 0.34}, {0.46, 0.50}, {0.49, 0.64}};
    const double dev_width = 0.022;

    const double edge = 0.04;  // soft edge half-width, normalized

    Tensor img({size, size});
    for (int r = 0; r < size; ++r) {
        const double y = (r + 0.5) / size;
        for (int c = 0; c < size; ++c) {
            const double x = (c + 0.5) / size;

            const double cov_body = soft_cov(ellipse_d(x, y, body_cx, body_cy, body_rx, body_ry), edge);
            const double cov_lung_l =
                soft_cov(ellipse_d(x, y, 0.5 - lung_sep, lung_cy, lung_rx, lung_ry), edge);
            const double cov_lung_r =
                soft_cov(ellipse_d(x, y, 0.5 + lung_sep, lung_cy, lung_rx, lung_ry), edge);

            double v = 0.0;
            v = mix(v, 0.55, cov_body);
            v = mix(v, 0.22, cov_lung_l * cov_body);
            v = mix(v, 0.22, cov_lung_r * cov_body);

            if (attrs.effusion) {
                // Fluid layering in the dependent lung bases: brighten the
                // bottom band of both lung fields.
                const double band = std::clamp((y - 0.58) / 0.13, 0.0, 1.0);
                v = mix(v, 0.62, band * std::max(cov_lung_l, cov_lung_r));
            }

            // Diaphragm shelf below the lung bases.
            const double cov_dia = std::clamp((y - diaphragm_y) / 0.04 + 0.5, 0.0, 1.0);
            v = mix(v, 0.72, cov_dia * cov_body);

            const double cov_heart = soft_cov(ellipse_d(x, y, heart_cx, heart_cy, heart_rx, heart_ry), edge);
            v = mix(v, 0.82, cov_heart * cov_body);

            if (attrs.opacity) {
                const double dx = x - blob_cx, dy = y - blob_cy;
                const double gauss = std::exp(-0.5 * (dx * dx + dy * dy) / (blob_r * blob_r));
                const double cov_lung = attrs.opacity_side == Side::Left ? cov_lung_l : cov_lung_r;
                v = mix(v, 0.78, gauss * cov_lung);
            }

            if (attrs.device) {
                double d = 1e9;
                for (int s = 0; s < 3; ++s)
                    d = std::min(d, seg_dist(x, y, dev[s][0], dev[s][1], dev[s + 1][0], dev[s + 1][1]));
                const double cov_dev = soft_cov(d / dev_width, 0.5);
                v = std::max(v, 0.95 * cov_dev * std::max(cov_body, 0.5));
            }

            img(r, c) = static_cast<float>(std::clamp(v, 0.0, 1.0));
        }
    }
    return img;
}

PhantomSample generate_sample(RngStream stream, int size) {
    auto attrs_rng = stream.fork("attrs");
    auto posture_rng = stream.fork("posture");
    auto report_rng = stream.fork("report");
    auto noise_rng = stream.fork("noise");

    PhantomSample s;
    s.attrs = sample_attrs(attrs_rng);
    s.psi_true = sample_posture(posture_rng);
    s.report = make_report(s.attrs, report_rng);
    s.labels = labels_from_attrs(s.attrs);

    const Tensor canonical = render_canonical(s.attrs, size);
    s.image = apply_affine(canonical, s.psi_true);
    for (auto& v : s.image.data)
        v = std::clamp(v + static_cast<float>(0.01 * noise_rng.next_normal()), 0.0f, 1.0f);
    return s;
}

Affine2x3 affine_matrix(const PostureParams& psi, int height, int width) {
    const double ct = std::cos(psi.theta), st = std::sin(psi.theta);
    // Rotation applied after per-axis scaling, both about the image center.
    const double a00 = ct * psi.s_x, a01 = -st * psi.s_y;
    const double a10 = st * psi.s_x, a11 = ct * psi.s_y;
    const double cx = 0.5 * (width - 1), cy = 0.5 * (height - 1);
    const double tx = psi.t_x * width, ty = psi.t_y * height;
    Affine2x3 f;
    f.m = {a00, a01, cx + tx - (a00 * cx + a01 * cy),
           a10, a11, cy + ty - (a10 * cx + a11 * cy)};
    return f;
}

Affine2x3 invert_affine(const Affine2x3& a) {
    const double det = a.m[0] * a.m[4] - a.m[1] * a.m[3];
    if (std::abs(det) < 1e-12) throw std::invalid_argument("invert_affine: singular matrix");
    const double i00 = a.m[4] / det, i01 = -a.m[1] / det;
    const double i10 = -a.m[3] / det, i11 = a.m[0] / det;
    Affine2x3 inv;
    inv.m = {i00, i01, -(i00 * a.m[2] + i01 * a.m[5]),
             i10, i11, -(i10 * a.m[2] + i11 * a.m[5])};
    return inv;
}

Tensor apply_affine_matrix(const Tensor& image, const Affine2x3& fwd) {
    if (image.shape.size() != 2) throw std::invalid_argument("apply_affine: expected (H,W) image");
    const int64_t h = image.shape[0], w = image.shape[1];
    const Affine2x3 inv = invert_affine(fwd);

    auto read = [&](int64_t r, int64_t c) -> double {
        if (r < 0 || r >= h || c < 0 || c >= w) return 0.0;
        return image(r, c);
    };

    Tensor out({h, w});
    for (int64_t r = 0; r < h; ++r) {
        for (int64_t c = 0; c < w; ++c) {
            // Pull each output pixel back through the inverse map and sample
            // the source bilinearly; off-frame reads are zero.
            const double sx = inv.m[0] * c + inv.m[1] * r + inv.m[2];
            const double sy = inv.m[3] * c + inv.m[4] * r + inv.m[5];
            const auto x0 = static_cast<int64_t>(std::floor(sx));
            const auto y0 = static_cast<int64_t>(std::floor(sy));
            const double fx = sx - x0, fy = sy - y0;
            const double v = (1 - fy) * ((1 - fx) * read(y0, x0) + fx * read(y0, x0 + 1)) +
                             fy * ((1 - fx) * read(y0 + 1, x0) + fx * read(y0 + 1, x0 + 1));
            out(r, c) = static_cast<float>(std::clamp(v, 0.0, 1.0));
        }
    }
    return out;
}

Tensor apply_affine(const Tensor& image, const PostureParams& psi) {
    return apply_affine_matrix(
        image, affine_matrix(psi, static_cast<int>(image.shape[0]), static_cast<int>(image.shape[1])));
}

Tensor canonical_mean(const std::vector<Tensor>& images, int k) {
    if (images.empty()) throw std::invalid_argument("canonical_mean: no images");
    const size_t n = std::min(images.size(), static_cast<size_t>(std::max(k, 1)));
    num::TensorT<double> acc(images[0].shape);
    for (size_t i = 0; i < n; ++i) {
        if (!images[i].same_shape(images[0]))
            throw std::invalid_argument("canonical_mean: mixed image shapes");
        for (size_t p = 0; p < acc.data.size(); ++p) acc.data[p] += images[i].data[p];
    }
    Tensor out(images[0].shape);
    for (size_t p = 0; p < acc.data.size(); ++p)
        out.data[p] = static_cast<float>(acc.data[p] / static_cast<double>(n));
    return out;
}

// ---- dataset ----

namespace {

void hash_sample(uint64_t& h, const PhantomSample& s) {
    const std::string q = quantize_bytes(s.image);
    h = io::hash_bytes(q.data(), q.size(), h);
    h = io::hash_bytes(s.report.data(), s.report.size(), h);
    for (int l : s.labels) {
        const auto b = static_cast<unsigned char>(l);
        h = io::hash_bytes(&b, 1, h);
    }
}

uint64_t dataset_content_hash(const std::vector<PhantomSample>& train,
                              const std::vector<PhantomSample>& test) {
    uint64_t h = 1469598103934665603ull;
    h = io::hash_bytes("train", 5, h);
    for (const auto& s : train) hash_sample(h, s);
    h = io::hash_bytes("test", 4, h);
    for (const auto& s : test) hash_sample(h, s);
    return h;
}

json attrs_to_json(const PhantomAttrs& a) {
    json out;
    out["effusion"] = a.effusion;
    out["cardiomegaly"] = a.cardiomegaly;
    out["opacity"] = a.opacity;
    out["opacity_side"] = a.opacity_side == Side::Left ? "left" : "right";
    out["opacity_size"] = a.opacity_size == BlobSize::Small ? "small" : "large";
    out["device"] = a.device;
    out["jitter"] = std::vector<float>(a.jitter.begin(), a.jitter.end());
    return out;
}

PhantomAttrs attrs_from_json(const json& j) {
    PhantomAttrs a;
    a.effusion = j.at("effusion").get<bool>();
    a.cardiomegaly = j.at("cardiomegaly").get<bool>();
    a.opacity = j.at("opacity").get<bool>();
    a.opacity_side = j.at("opacity_side").get<std::string>() == "left" ? Side::Left : Side::Right;
    a.opacity_size = j.at("opacity_size").get<std::string>() == "small" ? BlobSize::Small : BlobSize::Large;
    a.device = j.at("device").get<bool>();
    const auto jit = j.at("jitter").get<std::vector<float>>();
    if (jit.size() != a.jitter.size()) throw std::runtime_error("meta: bad jitter length");
    std::copy(jit.begin(), jit.end(), a.jitter.begin());
    return a;
}

json psi_to_json(const PostureParams& p) {
    json out;
    out["s_x"] = p.s_x;
    out["s_y"] = p.s_y;
    out["t_x"] = p.t_x;
    out["t_y"] = p.t_y;
    out["theta"] = p.theta;
    return out;
}

PostureParams psi_from_json(const json& j) {
    PostureParams p;
    p.s_x = j.at("s_x").get<double>();
    p.s_y = j.at("s_y").get<double>();
    p.t_x = j.at("t_x").get<double>();
    p.t_y = j.at("t_y").get<double>();
    p.theta = j.at("theta").get<double>();
    return p;
}

}  // namespace

std::string DatasetManifest::to_text() const {
    std::ostringstream ss;
    ss << "seed=" << seed << "\n";
    ss << "n_train=" << n_train << "\n";
    ss << "n_test=" << n_test << "\n";
    ss << "image_size=" << image_size << "\n";
    ss << "version=" << version << "\n";
    ss << "dataset_hash=" << io::hash_hex(dataset_hash) << "\n";
    return ss.str();
}

DatasetManifest DatasetManifest::from_text(const std::string& text) {
    DatasetManifest m;
    std::istringstream ss(text);
    std::string line;
    int seen = 0;
    while (std::getline(ss, line)) {
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos) throw std::runtime_error("manifest: malformed line: " + line);
        const std::string key = line.substr(0, eq), val = line.substr(eq + 1);
        if (key == "seed") m.seed = std::stoull(val);
        else if (key == "n_train") m.n_train = std::stoi(val);
        else if (key == "n_test") m.n_test = std::stoi(val);
        else if (key == "image_size") m.image_size = std::stoi(val);
        else if (key == "version") m.version = std::stoi(val);
        else if (key == "dataset_hash") m.dataset_hash = std::stoull(val, nullptr, 16);
        else throw std::runtime_error("manifest: unknown key: " + key);
        ++seen;
    }
    if (seen != 6) throw std::runtime_error("manifest: expected 6 keys, found " + std::to_string(seen));
    return m;
}

Dataset make_dataset(uint64_t master_seed, int n_train, int n_test, int image_size) {
    if (n_train < 0 || n_test < 0) throw std::invalid_argument("make_dataset: negative count");
    Dataset ds;
    ds.train.reserve(static_cast<size_t>(n_train));
    ds.test.reserve(static_cast<size_t>(n_test));
    for (int i = 0; i < n_train; ++i)
        ds.train.push_back(generate_sample(num::rng_stream(master_seed, "data/train/" + std::to_string(i)),
                                           image_size));
    for (int i = 0; i < n_test; ++i)
        ds.test.push_back(generate_sample(num::rng_stream(master_seed, "data/test/" + std::to_string(i)),
                                          image_size));
    ds.manifest.seed = master_seed;
    ds.manifest.n_train = n_train;
    ds.manifest.n_test = n_test;
    ds.manifest.image_size = image_size;
    ds.manifest.dataset_hash = dataset_content_hash(ds.train, ds.test);
    return ds;
}

void write_pgm(const Tensor& image, const std::string& path) {
    if (image.shape.size() != 2) throw std::invalid_argument("write_pgm: expected (H,W) image");
    std::string out = "P5\n" + std::to_string(image.shape[1]) + " " + std::to_string(image.shape[0]) +
                      "\n255\n";
    out += quantize_bytes(image);
    io::write_file_atomic(path, out);
}

Tensor read_pgm(const std::string& path) {
    const std::string bytes = io::read_file(path);
    size_t pos = 0;
    auto next_token = [&]() -> std::string {
        while (pos < bytes.size()) {
            if (std::isspace(static_cast<unsigned char>(bytes[pos]))) { ++pos; continue; }
            if (bytes[pos] == '#') {  // header comment runs to end of line
                while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
                continue;
            }
            break;
        }
        const size_t start = pos;
        while (pos < bytes.size() && !std::isspace(static_cast<unsigned char>(bytes[pos]))) ++pos;
        if (start == pos) throw std::runtime_error("pgm: truncated header: " + path);
        return bytes.substr(start, pos - start);
    };

    if (next_token() != "P5") throw std::runtime_error("pgm: not a P5 file: " + path);
    const int w = std::stoi(next_token());
    const int h = std::stoi(next_token());
    const int maxv = std::stoi(next_token());
    if (w <= 0 || h <= 0) throw std::runtime_error("pgm: bad dimensions: " + path);
    if (maxv != 255) throw std::runtime_error("pgm: unsupported maxval: " + path);
    ++pos;  // exactly one whitespace byte separates the header from the raster
    if (bytes.size() - pos < static_cast<size_t>(w) * static_cast<size_t>(h))
        throw std::runtime_error("pgm: truncated raster: " + path);

    Tensor img({h, w});
    for (int64_t i = 0; i < img.numel(); ++i)
        img(i) = static_cast<float>(static_cast<unsigned char>(bytes[pos + static_cast<size_t>(i)])) /
                 255.0f;
    return img;
}

void dump_dataset(const Dataset& ds, const std::string& dir) {
    io::ensure_dir(dir);
    const std::pair<std::string, const std::vector<PhantomSample>*> splits[] = {
        {"train", &ds.train}, {"test", &ds.test}};
    for (const auto& [name, samples] : splits) {
        const std::string split_dir = dir + "/" + name;
        io::ensure_dir(split_dir);
        std::string meta;
        for (size_t i = 0; i < samples->size(); ++i) {
            const auto& s = (*samples)[i];
            write_pgm(s.image, split_dir + "/" + std::to_string(i) + ".pgm");
            json line;
            line["index"] = i;
            line["attrs"] = attrs_to_json(s.attrs);
            line["psi_true"] = psi_to_json(s.psi_true);
            line["report"] = s.report;
            line["labels"] = s.labels;
            meta += line.dump() + "\n";
        }
        io::write_file_atomic(split_dir + "/meta.jsonl", meta);
    }
    io::write_file_atomic(dir + "/manifest.txt", ds.manifest.to_text());
}

namespace {

std::vector<PhantomSample> load_split(const std::string& split_dir, int expected) {
    std::vector<PhantomSample> out;
    out.reserve(static_cast<size_t>(expected));
    std::istringstream meta(io::read_file(split_dir + "/meta.jsonl"));
    std::string line;
    while (std::getline(meta, line)) {
        if (line.empty()) continue;
        const json j = json::parse(line);
        PhantomSample s;
        const auto index = j.at("index").get<size_t>();
        if (index != out.size())
            throw std::runtime_error("meta: out-of-order index in " + split_dir);
        s.attrs = attrs_from_json(j.at("attrs"));
        s.psi_true = psi_from_json(j.at("psi_true"));
        s.report = j.at("report").get<std::string>();
        const auto labels = j.at("labels").get<std::vector<int>>();
        if (labels.size() != static_cast<size_t>(kNumLabels))
            throw std::runtime_error("meta: bad label count in " + split_dir);
        std::copy(labels.begin(), labels.end(), s.labels.begin());
        s.image = read_pgm(split_dir + "/" + std::to_string(index) + ".pgm");
        out.push_back(std::move(s));
    }
    if (static_cast<int>(out.size()) != expected)
        throw std::runtime_error("meta: sample count mismatch in " + split_dir);
    return out;
}

}  // namespace

Dataset load_dataset(const std::string& dir) {
    Dataset ds;
    ds.manifest = DatasetManifest::from_text(io::read_file(dir + "/manifest.txt"));
    ds.train = load_split(dir + "/train", ds.manifest.n_train);
    ds.test = load_split(dir + "/test", ds.manifest.n_test);
    const uint64_t h = dataset_content_hash(ds.train, ds.test);
    if (h != ds.manifest.dataset_hash)
        throw std::runtime_error("dataset: content hash mismatch under " + dir);
    return ds;
}

}  // namespace cxrl::phantom
