#pragma once

#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include "bifseg/grid.hpp"

namespace bifseg::cli {

enum ExitCode { kOk = 0, kUsage = 1, kDataError = 2, kNumericError = 3 };

/// Lines of `fg x y` or `bg x y` in crop coordinates; blank lines and `#`
/// comments are skipped. Throws DataError naming the offending line.
ScribbleSet parse_scribbles(std::istream& in, int crop_width, int crop_height);
ScribbleSet read_scribble_file(const std::filesystem::path& path, int crop_width, int crop_height);

/// "x0,y0,x1,y1", inclusive.
BoundingBox parse_box(const std::string& text);

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace bifseg::cli
