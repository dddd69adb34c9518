#pragma once

namespace mvsdf::mc {

// Classic 256-case marching cubes tables. kEdgeTable[c] has bit e set when
// cube configuration c cuts edge e; kTriTable[c] lists triangles as triples
// of edge indices, -1 terminated.
extern const int kEdgeTable[256];
extern const int kTriTable[256][16];

}  // namespace mvsdf::mc
