#pragma once

#include <cstdint>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "arcp/io_util.hpp"
#include "arcp/tensor.hpp"

namespace arcp {

// Binary NetPBM (P6, maxval 255) reader/writer. Images are exchanged as
// [3 x H x W] tensors with values in [0, 1].

inline void write_p6(const std::string& path, const Tensor& image) {
    if (image.ndim() != 3 || image.dim(0) != 3)
        throw std::invalid_argument("write_p6: image must be [3 x H x W]");
    const int h = image.dim(1), w = image.dim(2);
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("write_p6: cannot write " + path);
    out << "P6\n" << w << " " << h << "\n255\n";
    std::vector<unsigned char> row(static_cast<std::size_t>(w) * 3);
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x)
            for (int c = 0; c < 3; ++c) {
                double v = image.at(c, y, x);
                v = v < 0.0 ? 0.0 : (v > 1.0 ? 1.0 : v);
                row[static_cast<std::size_t>(x) * 3 + c] =
                    static_cast<unsigned char>(v * 255.0 + 0.5);
            }
        out.write(reinterpret_cast<const char*>(row.data()), static_cast<std::streamsize>(row.size()));
    }
    if (!out) throw std::runtime_error("write_p6: write failed for " + path);
}

namespace detail {

// next whitespace-delimited token, skipping '#' comments
inline std::string next_pnm_token(std::istream& in, const std::string& path) {
    std::string tok;
    int c;
    while ((c = in.get()) != EOF) {
        if (c == '#') {
            while ((c = in.get()) != EOF && c != '\n') {
            }
            continue;
        }
        if (std::isspace(c)) {
            if (!tok.empty()) return tok;
            continue;
        }
        tok += static_cast<char>(c);
    }
    if (tok.empty()) throw std::runtime_error("read_p6: truncated header in " + path);
    return tok;
}

}  // namespace detail

inline Tensor read_p6(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("read_p6: cannot open " + path);
    if (detail::next_pnm_token(in, path) != "P6")
        throw std::runtime_error("read_p6: not a P6 file: " + path);
    const int w = std::stoi(detail::next_pnm_token(in, path));
    const int h = std::stoi(detail::next_pnm_token(in, path));
    const int maxval = std::stoi(detail::next_pnm_token(in, path));
    if (w <= 0 || h <= 0) throw std::runtime_error("read_p6: bad dimensions in " + path);
    if (maxval != 255) throw std::runtime_error("read_p6: only maxval 255 supported: " + path);

    std::vector<unsigned char> data(static_cast<std::size_t>(w) * h * 3);
    in.read(reinterpret_cast<char*>(data.data()), static_cast<std::streamsize>(data.size()));
    if (in.gcount() != static_cast<std::streamsize>(data.size()))
        throw std::runtime_error("read_p6: truncated pixel data in " + path);

    Tensor image({3, h, w});
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
            for (int c = 0; c < 3; ++c)
                image.at(c, y, x) =
                    data[(static_cast<std::size_t>(y) * w + x) * 3 + c] / 255.0;
    return image;
}

// ----- labeled image sets --------------------------------------------------

struct LabeledImage {
    Tensor pixels;  // [3 x H x W] in [0, 1]
    int label = 0;
};

using ImageDataset = std::vector<LabeledImage>;

// Label file: CSV `filename,label`, filenames relative to the file's
// directory, labels drawn from `class_names`.
inline ImageDataset load_labeled_images(const std::string& labels_csv,
                                        const std::vector<std::string>& class_names) {
    const std::string text = read_text_file(labels_csv);
    std::string dir;
    if (auto pos = labels_csv.find_last_of('/'); pos != std::string::npos)
        dir = labels_csv.substr(0, pos + 1);

    ImageDataset out;
    std::size_t lineno = 0, start = 0;
    while (start < text.size()) {
        std::size_t end = text.find('\n', start);
        if (end == std::string::npos) end = text.size();
        std::string line = strip_cr(text.substr(start, end - start));
        start = end + 1;
        ++lineno;
        if (line.empty()) continue;
        if (lineno == 1 && line == "filename,label") continue;
        auto fields = split_csv_line(line);
        if (fields.size() != 2)
            throw std::runtime_error("load_labeled_images: " + labels_csv + " line " +
                                     std::to_string(lineno) + ": expected 'filename,label'");
        int label = -1;
        for (std::size_t i = 0; i < class_names.size(); ++i)
            if (class_names[i] == fields[1]) label = static_cast<int>(i);
        if (label < 0)
            throw std::runtime_error("load_labeled_images: " + labels_csv + " line " +
                                     std::to_string(lineno) + ": unknown label '" + fields[1] + "'");
        out.push_back(LabeledImage{read_p6(dir + fields[0]), label});
    }
    return out;
}

}  // namespace arcp
