// Reference external backend: answers one framed request on stdin using the in-repo
// toy models. Used to exercise the subprocess bridge end to end.

#include "segedit/backends.hpp"
#include "segedit/combiner.hpp"

#include <iostream>
#include <iterator>

int main() {
    std::vector<uint8_t> request{std::istreambuf_iterator<char>(std::cin), std::istreambuf_iterator<char>()};
    segedit::ToySegmentation seg;
    segedit::ToyDetection det;
    segedit::BilinearSR sr;
    segedit::DiffusionInpaint inpaint;
    auto reply = segedit::serve_backend_request(request, seg, det, sr, inpaint);
    std::cout.write(reinterpret_cast<char const*>(reply.data()), static_cast<std::streamsize>(reply.size()));
    return 0;
}
