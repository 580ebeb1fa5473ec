/** Depth slider mapping. The slider travels [0, 1]; depths live in an
 * editor-configured [zMin, zMax] band. The pelvis is the depth origin and
 * its slider is locked at the z = 0 position. */

export const DEFAULT_DEPTH_RANGE: readonly [number, number] = [-50, 50];

export function depthFromSlider(
  slider: number,
  zMin: number,
  zMax: number,
): number {
  return zMin + slider * (zMax - zMin);
}

export function sliderFromDepth(
  z: number,
  zMin: number,
  zMax: number,
): number {
  const s = (z - zMin) / (zMax - zMin);
  return Math.min(1, Math.max(0, s));
}
