// Paint service check on the trained generator: drawing the dominant object concept over a background
// region should add pixels of that concept in most sessions.

#include <algorithm>
#include <cstdio>
#include <iostream>
#include <limits>

#include <CLI11.hpp>

#include "unitscope/pipeline.hpp"

using namespace unitscope;

namespace {

/// Side of the brushed square: the largest object diameter in the corpus is 22 pixels.
constexpr int kBrushPixels = 22;

std::uint64_t count_label(const Segmenter& seg, const Tensor& image, int concept_id)
{
    const Tensor batch = image.reshaped({1, image.dim(0), image.dim(1), image.dim(2)});
    const auto m = segment_images(seg.model, seg.params, batch).front().mask(concept_id);
    return static_cast<std::uint64_t>(std::count(m.begin(), m.end(), 1));
}

} // namespace

int main(int argc, char** argv)
{
    CLI::App app{"Paint check"};
    std::string workspace = "acceptance_workspace";
    int sessions = 50;
    double required = 0.7;
    app.add_option("--workspace", workspace)->capture_default_str();
    app.add_option("--sessions", sessions)->capture_default_str();
    CLI11_PARSE(app, argc, argv);

    try {
        Workspace ws(workspace, RunConfig{});
        ensure_stage(ws, Stage::intervene_gen);
        const int dominant = ws.read_json("intervene/generator_summary.json").at("dominant_concept").get<int>();
        PaintEngine engine = make_paint_engine(ws);
        const Segmenter seg = load_segmenter(ws);
        const Shape fm = engine.featuremap_shape();
        const int ch = kImageSize / fm[1], cw = kImageSize / fm[2];
        const int block = (kBrushPixels + ch - 1) / ch;

        int increased = 0;
        for (int s = 0; s < sessions; ++s) {
            const SessionView v = engine.create_session(static_cast<std::uint64_t>(1000 + s));
            const Tensor batch = v.base_image.reshaped({1, 3, kImageSize, kImageSize});
            const SegmentationMap base = segment_images(seg.model, seg.params, batch).front();
            // Block of block x block featuremap cells with the fewest object pixels.
            int best_y = 0, best_x = 0;
            long best = std::numeric_limits<long>::max();
            for (int y = 0; y + block <= fm[1]; ++y)
                for (int x = 0; x + block <= fm[2]; ++x) {
                    long n = 0;
                    for (int py = y * ch; py < (y + block) * ch; ++py)
                        for (int px = x * cw; px < (x + block) * cw; ++px) n += base.object[py * kImageSize + px] != 0;
                    if (n < best) {
                        best = n;
                        best_y = y;
                        best_x = x;
                    }
                }
            std::vector<std::uint8_t> mask(static_cast<std::size_t>(kImageSize) * kImageSize, 0);
            for (int py = best_y * ch; py < (best_y + block) * ch; ++py)
                for (int px = best_x * cw; px < (best_x + block) * cw; ++px) mask[py * kImageSize + px] = 1;
            const SessionView after = engine.apply_stroke(v.id, dominant, StrokeMode::draw,
                                                          RunLengthMask::encode(mask, kImageSize, kImageSize));
            increased += count_label(seg, after.image, dominant) > count_label(seg, v.base_image, dominant);
            const SessionView undone = engine.undo(v.id);
            if (!(undone.image == v.base_image)) throw std::runtime_error("undo did not restore the base image");
        }
        const double frac = static_cast<double>(increased) / sessions;
        char buf[200];
        std::snprintf(buf, sizeof buf, "%s drawn over background: pixel count increased in %d of %d sessions (%.0f%%, need >= %.0f%%)",
                      ConceptCatalog::standard().at(dominant).name.c_str(), increased, sessions, 100 * frac, 100 * required);
        std::cout << (frac >= required ? "PASS" : "FAIL") << " paint: " << buf << std::endl;
        return frac >= required ? 0 : 1;
    } catch (const std::exception& e) {
        std::cout << "FAIL paint: error: " << e.what() << std::endl;
        return 1;
    }
}
