/** Click-to-joint hit testing. */

/** Index of the nearest keypoint within radius pixels of the click, or
 * null. Exact ties go to the lower joint index (strict less-than keeps the
 * first minimum found). */
export function hitTest(
  click: readonly [number, number],
  keypoints: ReadonlyArray<ReadonlyArray<number>>,
  radius: number,
): number | null {
  let best: number | null = null;
  let bestDist = Infinity;
  for (let j = 0; j < keypoints.length; j++) {
    const kp = keypoints[j];
    if (!kp) continue;
    const dx = (kp[0] ?? 0) - click[0];
    const dy = (kp[1] ?? 0) - click[1];
    const d = Math.hypot(dx, dy);
    if (d <= radius && d < bestDist) {
      best = j;
      bestDist = d;
    }
  }
  return best;
}
